"""Detection losses (focal, L1, GIoU), optimal bipartite matching and the
weighted training objective."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .numerics import DTYPE, sigmoid

_P_CLAMP = 1e-12


@dataclass(frozen=True)
class Box:
    """Normalized centre-size box."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box extents must be positive, got w={self.w}, h={self.h}")

    @classmethod
    def from_corners(cls, x0: float, y0: float, x1: float, y1: float) -> "Box":
        return cls((x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0)

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h], dtype=DTYPE)

    def corners(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2, self.cy - self.h / 2,
                self.cx + self.w / 2, self.cy + self.h / 2)


def _as_boxes(b) -> np.ndarray:
    if isinstance(b, Box):
        return b.as_array()
    return np.asarray(b, dtype=DTYPE)


def cxcywh_to_corners(b: np.ndarray) -> np.ndarray:
    b = np.asarray(b, dtype=DTYPE)
    half = b[..., 2:] / 2
    return np.concatenate([b[..., :2] - half, b[..., :2] + half], axis=-1)


@dataclass
class DetectionWeights:
    w_cls: float = 1.0
    w_box: float = 5.0
    w_giou: float = 2.0
    focal_alpha: float | None = 0.25
    focal_gamma: float = 2.0


@dataclass
class LossBreakdown:
    l_cls: float = 0.0
    l_box: float = 0.0
    l_giou: float = 0.0
    l_m: float = 0.0
    l_p: float = 0.0
    total: float = 0.0
    # gradients of the weighted detection part w.r.t. boxes and logits
    d_boxes: np.ndarray | None = field(default=None, repr=False)
    d_logits: np.ndarray | None = field(default=None, repr=False)
    assignment: list[tuple[int, int]] = field(default_factory=list, repr=False)

    def detection_total(self, weights: DetectionWeights) -> float:
        return weights.w_cls * self.l_cls + weights.w_box * self.l_box + weights.w_giou * self.l_giou


# -- focal ---------------------------------------------------------------------


def focal_loss_elementwise(logits, targets, alpha: float | None = 0.25, gamma: float = 2.0):
    """Per-element sigmoid focal loss and its derivative w.r.t. the logit.

    ``alpha=None`` disables class weighting (alpha_t = 1 for both targets).
    """
    if alpha is not None and not (0.0 < alpha <= 1.0):
        raise ValueError("alpha must lie in (0, 1]")
    if gamma < 0:
        raise ValueError("gamma must be non-negative")
    x = np.asarray(logits, dtype=DTYPE)
    t = np.asarray(targets, dtype=DTYPE)
    p_raw = sigmoid(x)
    p = np.clip(p_raw, _P_CLAMP, 1.0 - _P_CLAMP)
    live = (p_raw > _P_CLAMP) & (p_raw < 1.0 - _P_CLAMP)
    pt = np.where(t > 0.5, p, 1.0 - p)
    if alpha is None:
        at = np.ones_like(pt)
    else:
        at = np.where(t > 0.5, alpha, 1.0 - alpha)
    one_m = 1.0 - pt
    logpt = np.log(pt)
    loss = -at * one_m**gamma * logpt
    # d loss / d pt
    if gamma > 0:
        dpt = at * (gamma * one_m ** (gamma - 1.0) * logpt - one_m**gamma / pt)
    else:
        dpt = -at / pt
    sign = np.where(t > 0.5, 1.0, -1.0)
    dx = dpt * sign * p * (1.0 - p) * live
    return loss, dx


def focal_loss(score: float, target: int, alpha: float | None = 0.25, gamma: float = 2.0) -> float:
    loss, _ = focal_loss_elementwise(np.array([score]), np.array([target]), alpha, gamma)
    return float(loss[0])


# -- boxes ---------------------------------------------------------------------


def l1_box_loss(a, b) -> float:
    return float(np.abs(_as_boxes(a) - _as_boxes(b)).sum())


def giou_with_grad(a: np.ndarray, b: np.ndarray):
    """GIoU for row-aligned (n, 4) centre-size boxes and its gradient w.r.t. ``a``."""
    a = np.atleast_2d(np.asarray(a, dtype=DTYPE))
    b = np.atleast_2d(np.asarray(b, dtype=DTYPE))
    ac, bc = cxcywh_to_corners(a), cxcywh_to_corners(b)
    ax0, ay0, ax1, ay1 = ac.T
    bx0, by0, bx1, by1 = bc.T
    ix0, iy0 = np.maximum(ax0, bx0), np.maximum(ay0, by0)
    ix1, iy1 = np.minimum(ax1, bx1), np.minimum(ay1, by1)
    iw_raw, ih_raw = ix1 - ix0, iy1 - iy0
    iw, ih = np.maximum(iw_raw, 0.0), np.maximum(ih_raw, 0.0)
    inter = iw * ih
    area_a = (ax1 - ax0) * (ay1 - ay0)
    area_b = (bx1 - bx0) * (by1 - by0)
    union = area_a + area_b - inter
    cw = np.maximum(ax1, bx1) - np.minimum(ax0, bx0)
    ch = np.maximum(ay1, by1) - np.minimum(ay0, by0)
    hull = cw * ch
    iou = inter / union
    giou = iou - (hull - union) / hull

    # giou = I/U - 1 + U/H with U = Aa + Ab - I
    dI = 1.0 / union + inter / union**2 - 1.0 / hull
    dAa = -inter / union**2 + 1.0 / hull
    dH = -union / hull**2
    diw = dI * ih * (iw_raw > 0)
    dih = dI * iw * (ih_raw > 0)
    dcw, dch = dH * ch, dH * cw
    daw = dAa * (ay1 - ay0)
    dah = dAa * (ax1 - ax0)
    dax0 = -diw * (ax0 > bx0) - dcw * (ax0 < bx0) - daw
    dax1 = diw * (ax1 < bx1) + dcw * (ax1 > bx1) + daw
    day0 = -dih * (ay0 > by0) - dch * (ay0 < by0) - dah
    day1 = dih * (ay1 < by1) + dch * (ay1 > by1) + dah
    grad = np.stack([dax0 + dax1, day0 + day1, (dax1 - dax0) / 2, (day1 - day0) / 2], axis=1)
    return giou, grad


def giou(a, b) -> float:
    g, _ = giou_with_grad(_as_boxes(a)[None], _as_boxes(b)[None])
    return float(g[0])


def pairwise_giou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    n, m = len(a), len(b)
    g, _ = giou_with_grad(np.repeat(a, m, axis=0), np.tile(b, (n, 1)))
    return g.reshape(n, m)


# -- matching ------------------------------------------------------------------


def bipartite_match(cost) -> list[tuple[int, int]]:
    """Minimum-cost assignment of min(Q, G) (row, col) pairs, sorted by row."""
    cost = np.asarray(cost, dtype=DTYPE)
    if cost.ndim != 2:
        raise ValueError("cost must be a 2-D matrix")
    if cost.size == 0:
        return []
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix contains non-finite entries")
    rows, cols = linear_sum_assignment(cost)
    return sorted(zip(rows.tolist(), cols.tolist()))


def exhaustive_match(cost) -> tuple[float, list[tuple[int, int]]]:
    """Brute-force optimal assignment; the first optimum in lexicographic order wins."""
    cost = np.asarray(cost, dtype=DTYPE)
    q, g = cost.shape
    best, best_pairs = np.inf, []
    if q >= g:
        for rows in itertools.permutations(range(q), g):
            total = sum(cost[r, c] for c, r in enumerate(rows))
            if total < best - 1e-12:
                best = total
                best_pairs = sorted((r, c) for c, r in enumerate(rows))
    else:
        for cols in itertools.permutations(range(g), q):
            total = sum(cost[r, c] for r, c in enumerate(cols))
            if total < best - 1e-12:
                best = total
                best_pairs = [(r, c) for r, c in enumerate(cols)]
    return float(best), best_pairs


def matching_cost(boxes: np.ndarray, logits: np.ndarray, gt_labels: np.ndarray,
                  gt_boxes: np.ndarray, weights: DetectionWeights) -> np.ndarray:
    prob = sigmoid(logits)
    c_cls = -prob[:, gt_labels]
    c_box = np.abs(boxes[:, None, :] - gt_boxes[None, :, :]).sum(-1)
    c_giou = 1.0 - pairwise_giou(boxes, gt_boxes)
    return weights.w_cls * c_cls + weights.w_box * c_box + weights.w_giou * c_giou


def detection_loss(boxes, logits, gt_labels, gt_boxes, weights: DetectionWeights | None = None,
                   assignment: list[tuple[int, int]] | None = None) -> LossBreakdown:
    """Set-prediction loss for one image.

    boxes (Q, 4), logits (Q, K), gt_labels (G,), gt_boxes (G, 4). Components are
    normalized by max(1, G); gradients refer to the weighted sum.
    """
    w = weights or DetectionWeights()
    boxes = np.asarray(boxes, dtype=DTYPE)
    logits = np.asarray(logits, dtype=DTYPE)
    gt_labels = np.asarray(gt_labels, dtype=int).reshape(-1)
    gt_boxes = np.asarray(gt_boxes, dtype=DTYPE).reshape(-1, 4)
    n_gt = len(gt_labels)
    norm = float(max(1, n_gt))
    if assignment is None:
        assignment = (bipartite_match(matching_cost(boxes, logits, gt_labels, gt_boxes, w))
                      if n_gt else [])
    targets = np.zeros_like(logits)
    for q, g in assignment:
        targets[q, gt_labels[g]] = 1.0
    fl, dfl = focal_loss_elementwise(logits, targets, w.focal_alpha, w.focal_gamma)
    l_cls = fl.sum() / norm
    d_logits = w.w_cls * dfl / norm
    d_boxes = np.zeros_like(boxes)
    l_box = l_giou = 0.0
    if assignment:
        qi = np.array([q for q, _ in assignment])
        gi = np.array([g for _, g in assignment])
        diff = boxes[qi] - gt_boxes[gi]
        l_box = np.abs(diff).sum() / norm
        gv, gg = giou_with_grad(boxes[qi], gt_boxes[gi])
        l_giou = (1.0 - gv).sum() / norm
        np.add.at(d_boxes, qi, (w.w_box * np.sign(diff) - w.w_giou * gg) / norm)
    out = LossBreakdown(l_cls=float(l_cls), l_box=float(l_box), l_giou=float(l_giou),
                        d_boxes=d_boxes, d_logits=d_logits, assignment=list(assignment))
    out.total = out.detection_total(w)
    return out


def total_loss(det: float, l_m: float, l_p: float, lambda_m: float = 0.7,
               lambda_p: float = 0.3) -> float:
    vals = (det, l_m, l_p, lambda_m, lambda_p)
    if not all(np.isfinite(v) for v in vals):
        raise ValueError("total_loss inputs must be finite")
    return float(det + lambda_m * l_m + lambda_p * l_p)
