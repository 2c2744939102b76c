"""Static-camera geometry priors: coordinate maps, per-row pseudo depth,
and the learned encoding that feeds attention and prediction."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import engine, nn
from .engine import ContractError, Tensor

log = logging.getLogger(__name__)


class PriorUnavailable(LookupError):
    """No annotations exist for a (view, category) pair."""


@dataclass
class CoordMaps:
    gx: np.ndarray  # [H,W], 0..1 left to right
    gy: np.ndarray  # [H,W], 0..1 top to bottom


@dataclass
class PseudoDepthMap:
    view: str
    category: int
    values: np.ndarray  # [H,W], constant along rows, pixel heights
    populated_rows: set = field(default_factory=set)


@dataclass
class GeometryPrior:
    view: str
    coords: CoordMaps
    depth_maps: list  # one PseudoDepthMap per category, in category order

    @property
    def height(self):
        return self.coords.gx.shape[0]

    @property
    def width(self):
        return self.coords.gx.shape[1]


def make_coord_maps(height, width):
    if height < 2 or width < 2:
        raise ContractError(
            f"coordinate maps need at least 2x2, got {height}x{width}"
        )
    gx = np.tile(np.arange(width, dtype=np.float64) / (width - 1), (height, 1))
    gy = np.tile(
        (np.arange(height, dtype=np.float64) / (height - 1))[:, None], (1, width)
    )
    return CoordMaps(gx=gx, gy=gy)


def row_profile_from_boxes(boxes, height):
    """Per-row (max+min)/2 of box pixel heights, attributed to the bottom edge row.

    Returns (values[H], populated_rows). Unpopulated interior rows are linearly
    interpolated in row index; rows outside the populated range clamp.
    """
    per_row = {}
    for (x1, y1, x2, y2) in boxes:
        h = y2 - y1
        if h <= 0:
            continue
        r = min(int(math.floor(y2)), height - 1)
        per_row.setdefault(r, []).append(h)
    if not per_row:
        raise PriorUnavailable("no usable boxes")
    rows = np.array(sorted(per_row), dtype=np.float64)
    vals = np.array([(max(per_row[r]) + min(per_row[r])) / 2.0 for r in sorted(per_row)])
    # np.interp clamps outside the populated range, as required
    profile = np.interp(np.arange(height, dtype=np.float64), rows, vals)
    return profile, set(int(r) for r in rows)


def estimate_pseudo_depth(annotations, view, category, height, width):
    """Build one per-(view, category) pseudo depth map from training boxes.

    annotations: iterable of (view, category, (x1, y1, x2, y2)) at the target
    resolution.
    """
    boxes = [b for v, c, b in annotations if v == view and c == category]
    if not boxes:
        raise PriorUnavailable(f"no annotations for view={view} category={category}")
    try:
        profile, populated = row_profile_from_boxes(boxes, height)
    except PriorUnavailable:
        raise PriorUnavailable(
            f"no non-degenerate boxes for view={view} category={category}"
        )
    values = np.tile(profile[:, None], (1, width))
    return PseudoDepthMap(view=view, category=category, values=values,
                          populated_rows=populated)


def uniform_fallback_depth(view, category, height, width):
    """Constant prior of 1 for pairs never seen in training; logged, exceptional."""
    log.warning(
        "no prior for view=%s category=%s; using uniform fallback", view, category
    )
    return PseudoDepthMap(view=view, category=category,
                          values=np.ones((height, width), dtype=np.float64))


def build_prior(annotations, view, n_categories, height, width):
    coords = make_coord_maps(height, width)
    maps = []
    for c in range(n_categories):
        try:
            maps.append(estimate_pseudo_depth(annotations, view, c, height, width))
        except PriorUnavailable:
            maps.append(uniform_fallback_depth(view, c, height, width))
    return GeometryPrior(view=view, coords=coords, depth_maps=maps)


def rescale_depth_map(dmap, height, width):
    """Resample to a new resolution; values scale with the vertical factor
    because they denote pixel heights."""
    src = dmap.values
    sh, sw = src.shape
    factor = height / sh
    rows = np.clip((np.arange(height) + 0.5) * sh / height - 0.5, 0, sh - 1)
    r0 = np.floor(rows).astype(int)
    r1 = np.minimum(r0 + 1, sh - 1)
    w1 = rows - r0
    profile = src[r0, 0] * (1 - w1) + src[r1, 0] * w1
    values = np.tile((profile * factor)[:, None], (1, width))
    scaled_rows = {min(int(math.floor(r * factor)), height - 1)
                   for r in dmap.populated_rows}
    return PseudoDepthMap(view=dmap.view, category=dmap.category, values=values,
                          populated_rows=scaled_rows)


# ---------------------------------------------------------------------------
# persistence: one JSON document per view
# ---------------------------------------------------------------------------


def save_prior(prior, path):
    doc = {
        "view": prior.view,
        "width": prior.width,
        "height": prior.height,
        "categories": [
            {"id": d.category, "rows": [float(v) for v in d.values[:, 0]]}
            for d in prior.depth_maps
        ],
    }
    with open(path, "w") as f:
        json.dump(doc, f)


def load_prior(path):
    with open(path) as f:
        doc = json.load(f)
    h, w = doc["height"], doc["width"]
    coords = make_coord_maps(h, w)
    maps = []
    for cat in doc["categories"]:
        profile = np.asarray(cat["rows"], dtype=np.float64)
        maps.append(PseudoDepthMap(
            view=doc["view"], category=cat["id"],
            values=np.tile(profile[:, None], (1, w)),
        ))
    return GeometryPrior(view=doc["view"], coords=coords, depth_maps=maps)


# ---------------------------------------------------------------------------
# learned encoding
# ---------------------------------------------------------------------------


class GeometryEncoder(nn.Module):
    """Two Conv-BN-ReLU blocks over the stacked geometry channels, plus the
    1x1 heads that produce scale attention logits and the prediction
    projection."""

    def __init__(self, rng, n_categories, scales=3, channels=16, pred_channels=16,
                 dtype=np.float32):
        super().__init__()
        self.n_categories = n_categories
        self.block1 = nn.ConvBnRelu2d(rng, 2 + n_categories, channels, 3,
                                      padding=1, dtype=dtype)
        self.block2 = nn.ConvBnRelu2d(rng, channels, channels, 3, padding=1,
                                      dtype=dtype)
        self.attn_conv = nn.Conv2d(rng, channels, scales, 1, dtype=dtype)
        self.pred_proj = nn.Conv2d(rng, channels, pred_channels, 1, dtype=dtype)
        # zero-init both geometry outputs: attention starts exactly uniform
        # (matching plain mean fusion) and the prediction channels start at
        # zero, so the geometry pathways ramp in gradually instead of
        # destabilizing the detector early in training
        for head in (self.attn_conv, self.pred_proj):
            head.weight.data[...] = 0.0
            head.bias.data[...] = 0.0


def prior_input_stack(prior, dtype=np.float32):
    """Stack [gx, gy, depth_1..depth_N] with depth in units of image heights."""
    h = prior.height
    chans = [prior.coords.gx, prior.coords.gy]
    chans += [d.values / h for d in prior.depth_maps]
    return Tensor(np.stack(chans).astype(dtype))


def encode_geometry(prior_stack, encoder):
    """Non-linear transformation of the geometry channels."""
    if prior_stack.shape[0] != 2 + encoder.n_categories:
        raise ContractError(
            f"geometry stack has {prior_stack.shape[0]} channels, "
            f"expected {2 + encoder.n_categories}"
        )
    return encoder.block2(encoder.block1(prior_stack))


def attention_maps(t_g, encoder):
    """Per-pixel softmax over scales from the encoded geometry."""
    return engine.softmax(encoder.attn_conv(t_g), axis=0)
