"""Bipartite matching between ground-truth objects and prediction slots.

The matcher is a plain augmenting-path Hungarian solver with a
deterministic lexicographic tie-break; the loss is the familiar
set-prediction recipe: class cross-entropy on every slot, L1 + GIoU box
terms on the matched slots, down-weighted no-object supervision on the
rest.  The assignment itself is treated as a constant during backward.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import NonFinite, Tensor

# Loss weights, adopted from the standard detection-transformer recipe.
LAMBDA_CLS = 1.0
LAMBDA_L1 = 5.0
LAMBDA_GIOU = 2.0
W_NOOBJ = 0.1

CLS_MOVING = 0
CLS_NOOBJ = 1
NUM_CLASSES = 2  # "moving" + no-object


class DegenerateBox(ValueError):
    pass


class InvalidAssignment(ValueError):
    pass


class TooManyObjects(ValueError):
    """More ground-truth objects than prediction slots."""


@dataclass(frozen=True)
class Box:
    """Axis-aligned box, center form, normalized to (0,1)."""

    cx: float
    cy: float
    w: float
    h: float

    def corners(self):
        if self.w <= 0 or self.h <= 0:
            raise DegenerateBox(f"non-positive extent: {self}")
        return (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )

    def area(self) -> float:
        x0, y0, x1, y1 = self.corners()
        return (x1 - x0) * (y1 - y0)


@dataclass
class MatchAssignment:
    pairs: list  # (gt_index, pred_index), injective both ways
    total_cost: float


# -- Hungarian ----------------------------------------------------------------


def _solve_assignment(cost: np.ndarray):
    """Min-cost assignment of all n rows to distinct columns, n <= m.

    Augmenting-path Hungarian with potentials, O(n^2 m).  Returns
    (col_of_row list, total).
    """
    n, m = cost.shape
    inf = math.inf
    u = [0.0] * (n + 1)
    v = [0.0] * (m + 1)
    p = [0] * (m + 1)  # p[j] = row matched to column j (1-indexed)
    way = [0] * (m + 1)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = [inf] * (m + 1)
        used = [False] * (m + 1)
        while True:
            used[j0] = True
            i0 = p[j0]
            delta = inf
            j1 = -1
            row = cost[i0 - 1]
            for j in range(1, m + 1):
                if not used[j]:
                    cur = row[j - 1] - u[i0] - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(m + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    col_of_row = [0] * n
    for j in range(1, m + 1):
        if p[j]:
            col_of_row[p[j] - 1] = j - 1
    total = 0.0
    for i in range(n):
        total += cost[i][col_of_row[i]]
    return col_of_row, total


def hungarian(cost) -> MatchAssignment:
    """Optimal assignment of each row to a distinct column (n <= m).

    Among cost-optimal assignments, returns the lexicographically
    smallest pair list.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError(f"cost must be 2-D, got shape {cost.shape}")
    n, m = cost.shape
    if n == 0:
        return MatchAssignment([], 0.0)
    if n > m:
        raise ValueError(f"need n <= m, got {n}x{m}")
    if not np.all(np.isfinite(cost)):
        raise NonFinite("cost matrix contains non-finite entries")

    _, best = _solve_assignment(cost)
    tol = 1e-9 * max(1.0, float(np.abs(cost).sum()))

    # Lexicographic tie-break: greedily pin each row to its smallest
    # column that keeps the optimum attainable.
    pairs = []
    rows = list(range(n))
    cols = list(range(m))
    prefix = 0.0
    for i in range(n):
        rows_left = [r for r in rows if r > i]
        for j in cols:
            sub = cost[np.ix_(rows_left, [c for c in cols if c != j])]
            _, sub_total = _solve_assignment(sub) if rows_left else ([], 0.0)
            cand = prefix + cost[i, j] + sub_total
            if cand <= best + tol:
                pairs.append((i, j))
                prefix += cost[i, j]
                cols.remove(j)
                break
        else:
            raise AssertionError("lexicographic refinement failed to place a row")

    total = 0.0
    for i, j in pairs:
        total += cost[i, j]
    return MatchAssignment(pairs, total)


# -- GIoU ----------------------------------------------------------------------


def iou(a: Box, b: Box) -> float:
    ax0, ay0, ax1, ay1 = a.corners()
    bx0, by0, bx1, by1 = b.corners()
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = a.area() + b.area() - inter
    return inter / union


def giou(a: Box, b: Box) -> float:
    """Generalized IoU in [-1, 1]."""
    ax0, ay0, ax1, ay1 = a.corners()
    bx0, by0, bx1, by1 = b.corners()
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = a.area() + b.area() - inter
    enc = (max(ax1, bx1) - min(ax0, bx0)) * (max(ay1, by1) - min(ay0, by0))
    return inter / union - (enc - union) / enc


# -- matching cost -------------------------------------------------------------


def _softmax_np(logits: np.ndarray) -> np.ndarray:
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def match_cost(class_logits, boxes, gts) -> np.ndarray:
    """Cost matrix (#gt x Nq) for Hungarian matching.

    entry(i,j) = -lambda_cls * p_j(class_i) + lambda_l1 * |b_i - b_j|_1
                 - lambda_giou * giou(b_i, b_j)
    Probabilities, not log-probs, per the usual convention.  Inputs may
    be Tensors; only the values matter here (matching is not
    differentiated through).
    """
    logits = class_logits.numpy() if isinstance(class_logits, Tensor) else np.asarray(class_logits)
    pb = boxes.numpy() if isinstance(boxes, Tensor) else np.asarray(boxes)
    if pb.shape[0] < 1:
        raise ValueError("need at least one prediction slot")
    probs = _softmax_np(logits)
    n_gt = len(gts)
    cost = np.zeros((n_gt, pb.shape[0]), dtype=np.float64)
    for i, (cls, gt_box) in enumerate(gts):
        gb = np.array([gt_box.cx, gt_box.cy, gt_box.w, gt_box.h])
        for j in range(pb.shape[0]):
            pbox = Box(*pb[j])
            cost[i, j] = (
                -LAMBDA_CLS * probs[j, cls]
                + LAMBDA_L1 * np.abs(gb - pb[j]).sum()
                - LAMBDA_GIOU * giou(gt_box, pbox)
            )
    return cost


def match(class_logits, boxes, gts) -> MatchAssignment:
    """Hungarian assignment of ground truths to prediction slots."""
    n_slots = (boxes.numpy() if isinstance(boxes, Tensor) else np.asarray(boxes)).shape[0]
    if len(gts) > n_slots:
        raise TooManyObjects(f"{len(gts)} ground truths but only {n_slots} slots")
    if not gts:
        return MatchAssignment([], 0.0)
    return hungarian(match_cost(class_logits, boxes, gts))


# -- set loss -------------------------------------------------------------------


def _giou_rows(pred: Tensor, gt: Tensor) -> Tensor:
    """Differentiable GIoU per row of two (k,4) cxcywh tensors; returns (k,1)."""

    def corners(b):
        cx = T.slice_axis(b, 1, 0, 1)
        cy = T.slice_axis(b, 1, 1, 2)
        w = T.slice_axis(b, 1, 2, 3)
        h = T.slice_axis(b, 1, 3, 4)
        hw = T.scale(w, 0.5)
        hh = T.scale(h, 0.5)
        return T.sub(cx, hw), T.sub(cy, hh), T.add(cx, hw), T.add(cy, hh)

    px0, py0, px1, py1 = corners(pred)
    gx0, gy0, gx1, gy1 = corners(gt)
    iw = T.relu(T.sub(T.minimum(px1, gx1), T.maximum(px0, gx0)))
    ih = T.relu(T.sub(T.minimum(py1, gy1), T.maximum(py0, gy0)))
    inter = T.mul(iw, ih)
    pa = T.mul(T.sub(px1, px0), T.sub(py1, py0))
    ga = T.mul(T.sub(gx1, gx0), T.sub(gy1, gy0))
    union = T.sub(T.add(pa, ga), inter)
    ew = T.sub(T.maximum(px1, gx1), T.minimum(px0, gx0))
    eh = T.sub(T.maximum(py1, gy1), T.minimum(py0, gy0))
    enc = T.mul(ew, eh)
    return T.sub(T.div(inter, union), T.div(T.sub(enc, union), enc))


def set_loss(class_logits: Tensor, boxes: Tensor, gts, assignment: MatchAssignment):
    """Total set-prediction loss and its term breakdown.

    Matched slots get class CE + L1 + (1 - GIoU); unmatched slots get
    no-object CE down-weighted by W_NOOBJ.  Returns (scalar Tensor,
    dict of float terms).
    """
    n_slots = class_logits.shape[0]
    gt_idx = [i for i, _ in assignment.pairs]
    pred_idx = [j for _, j in assignment.pairs]
    if sorted(gt_idx) != list(range(len(gts))) or len(set(pred_idx)) != len(pred_idx):
        raise InvalidAssignment(f"assignment {assignment.pairs} invalid for {len(gts)} gts")
    if any(j < 0 or j >= n_slots for j in pred_idx):
        raise InvalidAssignment("prediction index out of range")

    targets = np.full(n_slots, CLS_NOOBJ, dtype=np.int64)
    weights = np.full(n_slots, W_NOOBJ, dtype=np.float64)
    for gi, pj in assignment.pairs:
        targets[pj] = gts[gi][0]
        weights[pj] = 1.0
    ce = T.cross_entropy_logits(class_logits, targets, weights)

    k = len(assignment.pairs)
    if k == 0:
        total = T.scale(ce, LAMBDA_CLS)
        return total, {
            "class": ce.item(),
            "l1": 0.0,
            "giou": 0.0,
            "total": total.item(),
        }

    matched = T.concat([T.slice_axis(boxes, 0, j, j + 1) for _, j in assignment.pairs], axis=0)
    gt_arr = np.array(
        [[gts[gi][1].cx, gts[gi][1].cy, gts[gi][1].w, gts[gi][1].h] for gi, _ in assignment.pairs]
    )
    gt_t = Tensor(gt_arr)
    l1 = T.scale(T.l1_distance(matched, gt_t), 1.0 / k)
    giou_vals = _giou_rows(matched, gt_t)
    giou_loss = T.scale(T.sub(Tensor(np.ones((k, 1))), giou_vals), 1.0)
    giou_mean = T.scale(T.tsum(giou_loss), 1.0 / k)

    total = T.add(
        T.add(T.scale(ce, LAMBDA_CLS), T.scale(l1, LAMBDA_L1)),
        T.scale(giou_mean, LAMBDA_GIOU),
    )
    return total, {
        "class": ce.item(),
        "l1": l1.item(),
        "giou": giou_mean.item(),
        "total": total.item(),
    }
