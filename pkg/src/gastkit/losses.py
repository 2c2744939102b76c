"""Training objective: penalty-reduced focal loss on corner heatmaps and the
pull-push embedding loss, applied to the first and last frame of a clip."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import engine
from .engine import Tensor

log = logging.getLogger(__name__)


@dataclass
class LossConfig:
    w_focal: float = 1.0
    w_pull: float = 0.1
    w_push: float = 0.1
    focal_alpha: float = 2.0
    focal_beta: float = 4.0
    push_margin: float = 1.0
    gaussian_iou: float = 0.3


@dataclass
class HeatmapTarget:
    heatmaps: dict  # kind -> [N,H',W'] float array, 1 at corners, gaussian tails
    objects: list = field(default_factory=list)  # (category, (tlx,tly), (brx,bry))


def _iou_displaced_tl(w, h, dx, dy):
    """IoU between (0,0,w,h) and the box whose top-left moved by (dx,dy)."""
    ix = w - max(0.0, dx)
    iy = h - max(0.0, dy)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    union = w * h + (w - dx) * (h - dy) - inter
    return inter / union


def gaussian_radius(w, h, min_iou=0.3):
    """Largest integer displacement of one corner that keeps IoU >= min_iou."""
    r = 1
    while True:
        worst = min(
            _iou_displaced_tl(w, h, sx * (r + 1), sy * (r + 1))
            for sx in (-1, 1)
            for sy in (-1, 1)
        )
        if worst < min_iou:
            return r
        r += 1


def _splat(target, cx, cy, radius):
    """Max-combine an unnormalized gaussian of sigma radius/3 around (cx, cy)."""
    h, w = target.shape
    sigma = radius / 3.0
    x0, x1 = max(0, cx - radius), min(w - 1, cx + radius)
    y0, y1 = max(0, cy - radius), min(h - 1, cy + radius)
    ys, xs = np.mgrid[y0 : y1 + 1, x0 : x1 + 1]
    g = np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2.0 * sigma**2))
    np.maximum(target[y0 : y1 + 1, x0 : x1 + 1], g,
               out=target[y0 : y1 + 1, x0 : x1 + 1])
    target[cy, cx] = 1.0


def _corner_pixel(x, y, h, w):
    return (min(max(int(round(x)), 0), w - 1), min(max(int(round(y)), 0), h - 1))


def make_targets(boxes, n_categories, hw, cfg=None):
    """Gaussian corner targets for one supervised frame.

    boxes: iterable of (category, x1, y1, x2, y2) at working resolution.
    """
    cfg = cfg or LossConfig()
    h, w = hw
    heat = {k: np.zeros((n_categories, h, w)) for k in ("tl", "br")}
    objects = []
    for (cat, x1, y1, x2, y2) in boxes:
        bw, bh = x2 - x1, y2 - y1
        if bw <= 0 or bh <= 0:
            log.warning("skipping degenerate box %s", (cat, x1, y1, x2, y2))
            continue
        r = gaussian_radius(bw, bh, cfg.gaussian_iou)
        tl = _corner_pixel(x1, y1, h, w)
        br = _corner_pixel(x2, y2, h, w)
        _splat(heat["tl"][cat], tl[0], tl[1], r)
        _splat(heat["br"][cat], br[0], br[1], r)
        objects.append((cat, tl, br))
    return HeatmapTarget(heatmaps=heat, objects=objects)


def focal_loss(pred, target, alpha=2.0, beta=4.0):
    """Penalty-reduced focal loss; pred strictly inside (0,1), target in [0,1]."""
    pos = target == 1.0
    npos = max(1, int(pos.sum()))
    posm = Tensor(pos.astype(pred.dtype))
    negw = Tensor(((1.0 - target) ** beta * ~pos).astype(pred.dtype))
    one_minus = 1.0 - pred
    loss = posm * one_minus**alpha * engine.log(pred) + negw * pred**alpha * engine.log(one_minus)
    return loss.sum() * (-1.0 / npos)


def pull_push_loss(emb_tl, emb_br, objects, margin=1.0):
    """Associative embedding loss over one frame's objects.

    emb_tl/emb_br: [1,H',W'] embedding maps; objects as in HeatmapTarget.
    """
    k = len(objects)
    if k == 0:
        zero = Tensor(np.zeros((), dtype=emb_tl.dtype))
        return zero, zero
    tx = np.array([o[1][0] for o in objects])
    ty = np.array([o[1][1] for o in objects])
    bx = np.array([o[2][0] for o in objects])
    by = np.array([o[2][1] for o in objects])
    e_tl = emb_tl[0, ty, tx]
    e_br = emb_br[0, by, bx]
    e_mean = (e_tl + e_br) * 0.5
    pull = ((e_tl - e_mean) ** 2 + (e_br - e_mean) ** 2).sum() * (1.0 / k)
    if k == 1:
        return pull, Tensor(np.zeros((), dtype=emb_tl.dtype))
    a = engine.reshape(e_mean, (k, 1))
    b = engine.reshape(e_mean, (1, k))
    diff = a - b
    dist = engine.relu(diff) + engine.relu(-diff)
    hinge = engine.relu(margin - dist)
    # the k diagonal terms each contribute exactly margin; remove them
    push = (hinge.sum() - float(k) * margin) * (1.0 / (k * (k - 1)))
    return pull, push


def total_loss(fields, targets, cfg=None):
    """Weighted sum over both supervised frame slots.

    targets: {"first": HeatmapTarget, "last": HeatmapTarget}.
    Returns (total, parts) with parts = dict of float focal/pull/push sums.
    """
    cfg = cfg or LossConfig()
    total = None
    parts = {"focal": 0.0, "pull": 0.0, "push": 0.0}
    for slot, tgt in targets.items():
        f = None
        for kind in ("tl", "br"):
            term = focal_loss(fields.heatmaps[(slot, kind)],
                              tgt.heatmaps[kind], cfg.focal_alpha, cfg.focal_beta)
            f = term if f is None else f + term
        pull, push = pull_push_loss(
            fields.embeddings[(slot, "tl")], fields.embeddings[(slot, "br")],
            tgt.objects, cfg.push_margin,
        )
        parts["focal"] += f.item()
        parts["pull"] += pull.item()
        parts["push"] += push.item()
        term = cfg.w_focal * f + cfg.w_pull * pull + cfg.w_push * push
        total = term if total is None else total + term
    return total, parts
