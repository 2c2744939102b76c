"""Detection evaluation: per-category AP at IoU 0.5/0.75, their mean as mAP,
PR curve emission, and corner-level PCK."""

from __future__ import annotations

import csv
import json
import math

import numpy as np

from .decoder import iou

IOU_THRESHOLDS = (0.5, 0.75)


def match_detections(dets, gts, iou_thresh):
    """Greedy TP/FP flags for score-sorted detections of one category+frame.

    dets: [(score, box)] sorted by descending score; gts: [box].
    Each detection takes the highest-IoU unmatched ground truth at or above
    the threshold.
    """
    matched = [False] * len(gts)
    flags = []
    for score, box in dets:
        best, best_iou = -1, iou_thresh
        for j, gt in enumerate(gts):
            if matched[j]:
                continue
            v = iou(box, gt)
            if v >= best_iou:
                best, best_iou = j, v
        if best >= 0:
            matched[best] = True
            flags.append(True)
        else:
            flags.append(False)
    return flags


def average_precision(flags, num_gt):
    """Every-point-interpolation area under the precision-recall steps."""
    if num_gt < 1:
        raise ValueError("average_precision needs at least one ground truth")
    if not flags:
        return 0.0, [(0.0, 1.0)]
    tp = np.cumsum(np.asarray(flags, dtype=np.float64))
    fp = np.cumsum(~np.asarray(flags, dtype=bool))
    recall = tp / num_gt
    precision = tp / (tp + fp)
    # monotone non-increasing from the right
    prec_m = np.maximum.accumulate(precision[::-1])[::-1]
    ap = 0.0
    prev_r = 0.0
    for r, p in zip(recall, prec_m):
        ap += (r - prev_r) * p
        prev_r = r
    return float(ap), list(zip(recall.tolist(), prec_m.tolist()))


def evaluate_detections(dets_by_frame, gts_by_frame, categories,
                        iou_thresholds=IOU_THRESHOLDS):
    """Full AP evaluation.

    dets_by_frame: {frame_key: [(category, score, box)]}
    gts_by_frame: {frame_key: [(category, box)]}
    Returns {"per_category": {...}, "mAP": float, ...}.
    """
    per_cat = {}
    ap_means = {t: [] for t in iou_thresholds}
    for cat in categories:
        num_gt = sum(
            sum(1 for c, _ in gts if c == cat) for gts in gts_by_frame.values()
        )
        entry = {}
        for t in iou_thresholds:
            flags, scores = [], []
            for key, dets in dets_by_frame.items():
                cat_dets = sorted(
                    ((s, b) for c, s, b in dets if c == cat),
                    key=lambda d: -d[0],
                )
                gts = [b for c, b in gts_by_frame.get(key, []) if c == cat]
                fl = match_detections(cat_dets, gts, t)
                flags.extend(fl)
                scores.extend(s for s, _ in cat_dets)
            order = (np.argsort(-np.asarray(scores), kind="stable")
                     if scores else [])
            flags = [flags[i] for i in order]
            scores = [scores[i] for i in order]
            if num_gt == 0:
                entry[f"AP{int(t * 100)}"] = None
                entry[f"PR{int(t * 100)}"] = []
                continue
            ap, pr = average_precision(flags, num_gt)
            entry[f"AP{int(t * 100)}"] = ap
            entry[f"PR{int(t * 100)}"] = [
                (s, r, p) for s, (r, p) in zip(scores, pr)
            ]
            ap_means[t].append(ap)
        entry["num_gt"] = num_gt
        per_cat[cat] = entry
    means = {
        f"AP{int(t * 100)}": (float(np.mean(v)) if v else None)
        for t, v in ap_means.items()
    }
    present = [m for m in means.values() if m is not None]
    m_ap = float(np.mean([means[f"AP{int(t * 100)}"] for t in iou_thresholds])) \
        if len(present) == len(iou_thresholds) else None
    return {"per_category": per_cat, "means": means, "mAP": m_ap}


def corner_pck(pred_corners, gt_corners, radius_px=4.0):
    """Fraction of GT corners with a same category+kind prediction in range.

    Corners are (kind, category, x, y) tuples.
    """
    if not gt_corners:
        return 0.0
    hit = 0
    for gk, gc, gx, gy in gt_corners:
        for pk, pc, px, py in pred_corners:
            if pk == gk and pc == gc and math.hypot(px - gx, py - gy) <= radius_px:
                hit += 1
                break
    return hit / len(gt_corners)


def save_report(report, path):
    with open(path, "w") as f:
        json.dump(report, f, indent=2)


def save_pr_curves(report, out_dir):
    """One CSV (threshold is in the filename) per category per IoU level."""
    from pathlib import Path

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for cat, entry in report["per_category"].items():
        for t in IOU_THRESHOLDS:
            pr = entry.get(f"PR{int(t * 100)}") or []
            path = out_dir / f"pr_cat{cat}_iou{int(t * 100)}.csv"
            with open(path, "w", newline="") as f:
                wr = csv.writer(f)
                wr.writerow(["threshold", "precision", "recall"])
                for s, r, p in pr:
                    wr.writerow([s, p, r])
