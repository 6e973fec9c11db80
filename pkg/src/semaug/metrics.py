"""COCO-style AP50:95 at desk scale, the harmonic-mean trade-off score and
routing diagnostics."""

from __future__ import annotations

import numpy as np

from .losses import cxcywh_to_corners

IOU_THRESHOLDS = np.round(np.arange(0.5, 0.951, 0.05), 2)
# float slack when comparing an IoU against a threshold
_IOU_SLACK = 1e-12


def box_iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """IoU between centre-size boxes, corners clamped to the unit square."""
    ac = np.clip(cxcywh_to_corners(np.asarray(a).reshape(-1, 4)), 0.0, 1.0)
    bc = np.clip(cxcywh_to_corners(np.asarray(b).reshape(-1, 4)), 0.0, 1.0)
    x0 = np.maximum(ac[:, None, 0], bc[None, :, 0])
    y0 = np.maximum(ac[:, None, 1], bc[None, :, 1])
    x1 = np.minimum(ac[:, None, 2], bc[None, :, 2])
    y1 = np.minimum(ac[:, None, 3], bc[None, :, 3])
    inter = np.clip(x1 - x0, 0, None) * np.clip(y1 - y0, 0, None)
    area_a = (ac[:, 2] - ac[:, 0]) * (ac[:, 3] - ac[:, 1])
    area_b = (bc[:, 2] - bc[:, 0]) * (bc[:, 3] - bc[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def average_precision(recall: np.ndarray, precision: np.ndarray) -> float:
    """All-point interpolated area under the precision envelope."""
    r = np.concatenate([[0.0], recall, [1.0]])
    p = np.concatenate([[0.0], precision, [0.0]])
    p = np.maximum.accumulate(p[::-1])[::-1]
    idx = np.flatnonzero(r[1:] != r[:-1])
    return float(np.sum((r[idx + 1] - r[idx]) * p[idx + 1]))


def _category_ap(preds, gts, thr: float) -> float:
    """preds: list of (image, score, box); gts: dict image -> (G, 4) boxes."""
    n_gt = sum(len(b) for b in gts.values())
    if n_gt == 0:
        return float("nan")
    if not preds:
        return 0.0
    order = sorted(range(len(preds)), key=lambda i: (-preds[i][1], i))
    used = {img: np.zeros(len(b), dtype=bool) for img, b in gts.items()}
    tp = np.zeros(len(order))
    for rank, i in enumerate(order):
        img, _, box = preds[i]
        g = gts.get(img)
        if g is None or len(g) == 0:
            continue
        ious = box_iou_matrix(box[None], g)[0]
        ious[used[img]] = -1.0
        j = int(np.argmax(ious))
        if ious[j] >= thr - _IOU_SLACK:
            used[img][j] = True
            tp[rank] = 1.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1.0 - tp)
    return average_precision(ctp / n_gt, ctp / (ctp + cfp))


def mean_average_precision(predictions, ground_truth, n_categories: int,
                           thresholds=IOU_THRESHOLDS) -> float:
    """Mean over categories (with ground truth) of AP averaged over IoU thresholds.

    ``predictions[i]`` is (labels, scores, boxes) for image i and
    ``ground_truth[i]`` is (labels, boxes).
    """
    per_cat_preds = {k: [] for k in range(n_categories)}
    per_cat_gts = {k: {} for k in range(n_categories)}
    for img, (labels, boxes) in enumerate(ground_truth):
        labels = np.asarray(labels, dtype=int)
        boxes = np.asarray(boxes, dtype=float).reshape(-1, 4)
        for k in range(n_categories):
            per_cat_gts[k][img] = boxes[labels == k]
    for img, (labels, scores, boxes) in enumerate(predictions):
        boxes = np.asarray(boxes, dtype=float).reshape(-1, 4)
        for lab, sc, bx in zip(np.asarray(labels, dtype=int), np.asarray(scores, dtype=float), boxes):
            per_cat_preds[int(lab)].append((img, float(sc), bx))
    aps = []
    for k in range(n_categories):
        vals = [_category_ap(per_cat_preds[k], per_cat_gts[k], t) for t in thresholds]
        if not np.isnan(vals[0]):
            aps.append(float(np.mean(vals)))
    return float(np.mean(aps)) if aps else 0.0


def harmonic_mean(map_tgt: float, map_general: float) -> float:
    if map_tgt < 0 or map_general < 0:
        raise ValueError("mAP values must be non-negative")
    if map_tgt + map_general == 0:
        return 0.0
    return 2.0 * map_tgt * map_general / (map_tgt + map_general)


def overlap_coefficient(errors_in, errors_out, bins: int = 50) -> float:
    a = np.asarray(errors_in, dtype=float)
    b = np.asarray(errors_out, dtype=float)
    both = np.concatenate([a, b])
    lo, hi = both.min(), both.max()
    edges = np.histogram_bin_edges(both, bins=bins, range=(lo, hi) if hi > lo else None)
    p = np.histogram(a, edges)[0] / len(a)
    q = np.histogram(b, edges)[0] / len(b)
    return float(np.minimum(p, q).sum())


def routing_accuracy(errors_in, errors_out, tau: float) -> float:
    a = np.asarray(errors_in, dtype=float)
    b = np.asarray(errors_out, dtype=float)
    return float(((a < tau).sum() + (b >= tau).sum()) / (len(a) + len(b)))


def routing_metrics(errors_in, errors_out, tau: float, bins: int = 50) -> tuple[float, float]:
    if len(errors_in) == 0 or len(errors_out) == 0:
        raise ValueError("both error lists must be non-empty")
    return routing_accuracy(errors_in, errors_out, tau), overlap_coefficient(errors_in, errors_out, bins)


def calibrate_tau(errors_in, errors_out) -> float:
    """Threshold maximizing routing accuracy; the smallest wins ties.

    Candidates are the smallest error (everything routed to the pretrained
    arm), the midpoints of the sorted unique errors, and half a gap above
    the largest error (everything routed to the augmented arm).
    """
    if len(errors_in) == 0 or len(errors_out) == 0:
        raise ValueError("both error lists must be non-empty")
    a = np.sort(np.asarray(errors_in, dtype=float))
    b = np.sort(np.asarray(errors_out, dtype=float))
    uniq = np.unique(np.concatenate([a, b]))
    top_gap = (uniq[-1] - uniq[-2]) / 2 if len(uniq) > 1 else max(abs(uniq[0]), 1.0) / 2
    cands = np.concatenate([uniq[:1], (uniq[:-1] + uniq[1:]) / 2, [uniq[-1] + top_gap]])
    correct = np.searchsorted(a, cands, side="left") + (len(b) - np.searchsorted(b, cands, side="left"))
    return float(cands[int(np.argmax(correct))])
