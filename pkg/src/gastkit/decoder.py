"""Decode corner field sets into scored boxes: peak extraction, embedding
grouping, dual-prediction merging, and NMS."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Corner:
    kind: str  # "tl" | "br"
    category: int
    x: int
    y: int
    score: float
    embedding: float


@dataclass(frozen=True)
class Detection:
    box: tuple  # (x1, y1, x2, y2) at input resolution
    category: int
    score: float


def iou(a, b):
    ix = min(a[2], b[2]) - max(a[0], b[0])
    iy = min(a[3], b[3]) - max(a[1], b[1])
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    return inter / (area_a + area_b - inter)


def extract_corners(heatmap, embedding, kind, threshold=0.1, topk=20):
    """3x3-neighborhood maxima above threshold, top-k per category.

    Plateau ties go to the smallest (y, x) pixel.
    """
    heatmap = np.asarray(heatmap)
    embedding = np.asarray(embedding)
    n, h, w = heatmap.shape
    corners = []
    for cat in range(n):
        hm = heatmap[cat]
        padded = np.full((h + 2, w + 2), -np.inf)
        padded[1:-1, 1:-1] = hm
        peak = hm >= threshold
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                if dy == 0 and dx == 0:
                    continue
                nv = padded[1 + dy : 1 + dy + h, 1 + dx : 1 + dx + w]
                beaten = nv > hm
                if (dy, dx) < (0, 0):  # equal-valued lex-smaller neighbor wins
                    beaten |= nv == hm
                peak &= ~beaten
        ys, xs = np.nonzero(peak)
        found = [
            Corner(kind, cat, int(x), int(y), float(hm[y, x]),
                   float(embedding[0, y, x]))
            for y, x in zip(ys, xs)
        ]
        found.sort(key=lambda c: (-c.score, c.y, c.x))
        corners.extend(found[:topk])
    return corners


def group_corners(tls, brs, emb_threshold=0.5, scale=4.0):
    """Greedy one-to-one pairing of same-category corners by score.

    A pair is valid when the top-left sits strictly up-left of the
    bottom-right and the embedding distance is within emb_threshold. Boxes
    are rescaled from working to input resolution by `scale`.
    """
    candidates = []
    for i, tl in enumerate(tls):
        for j, br in enumerate(brs):
            if tl.category != br.category:
                continue
            if not (tl.x < br.x and tl.y < br.y):
                continue
            if abs(tl.embedding - br.embedding) > emb_threshold:
                continue
            candidates.append(((tl.score + br.score) / 2.0, i, j))
    candidates.sort(key=lambda c: (-c[0], c[1], c[2]))
    used_tl, used_br = set(), set()
    dets = []
    for score, i, j in candidates:
        if i in used_tl or j in used_br:
            continue
        used_tl.add(i)
        used_br.add(j)
        tl, br = tls[i], brs[j]
        dets.append(Detection(
            box=(tl.x * scale, tl.y * scale, br.x * scale, br.y * scale),
            category=tl.category, score=score,
        ))
    return dets


def nms(dets, iou_thresh=0.5):
    """Greedy score-descending suppression, per category."""
    order = sorted(dets, key=lambda d: (-d.score, d.box))
    keep = []
    for d in order:
        if all(k.category != d.category or iou(k.box, d.box) < iou_thresh
               for k in keep):
            keep.append(d)
    return keep


def merge_dual_predictions(dets_as_last, dets_as_first, iou_nms=0.5):
    """Union of the two per-frame prediction passes, then NMS."""
    return nms(list(dets_as_last) + list(dets_as_first), iou_nms)


def decode_frame(fields, slot, threshold=0.1, topk=20, emb_threshold=0.5,
                 scale=4.0):
    """Corners and grouped detections for one frame slot of a field set."""
    tl_heat = fields.heatmaps[(slot, "tl")].data
    br_heat = fields.heatmaps[(slot, "br")].data
    tls = extract_corners(tl_heat, fields.embeddings[(slot, "tl")].data, "tl",
                          threshold, topk)
    brs = extract_corners(br_heat, fields.embeddings[(slot, "br")].data, "br",
                          threshold, topk)
    return group_corners(tls, brs, emb_threshold, scale)
