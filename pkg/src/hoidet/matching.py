"""Optimal bipartite assignment for set supervision.

Contains the exact O(K^3) Kuhn-Munkres solver, the detection-stage matcher
that maps ground-truth instances to instance slots, and the interaction
matching cost built from pointer probabilities and action BCE.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import CapacityError, InputError
from .geometry import l1_box_distance

_BCE_EPS = 1e-7


@dataclass
class CostMatrix:
    """K x K cost entries; row = padded ground-truth slot, col = prediction.

    Rows beyond the real ground truth are all-zero padding, so they never
    influence which real pair matches which prediction. Component matrices,
    when present, decompose each entry into pointer and action parts.
    """

    entries: np.ndarray
    n_real: int
    pointer_h: Optional[np.ndarray] = None
    pointer_o: Optional[np.ndarray] = None
    action: Optional[np.ndarray] = None


@dataclass
class PairCost:
    gt: int
    pred: int
    total: float
    pointer_h: float = 0.0
    pointer_o: float = 0.0
    action: float = 0.0


@dataclass
class MatchResult:
    """Permutation sigma mapping ground-truth slot i to prediction sigma[i]."""

    sigma: tuple[int, ...]
    total_cost: float
    per_pair: list[PairCost] = field(default_factory=list)

    def matched(self, n_real: int) -> list[tuple[int, int]]:
        return [(i, self.sigma[i]) for i in range(n_real)]


def solve_assignment(cost: np.ndarray) -> list[int]:
    """Exact minimum-cost assignment of rows to distinct columns.

    Shortest-augmenting-path Kuhn-Munkres with potentials, O(rows * n^2).
    Accepts rows <= columns; returns the matched column per row. Scans
    columns in ascending order, so degenerate (constant) matrices resolve
    to the identity permutation.
    """
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2 or c.shape[0] > c.shape[1]:
        raise InputError(f"cost matrix must have rows <= columns, got {c.shape}")
    if not np.isfinite(c).all():
        raise InputError("cost matrix contains non-finite entries")
    rows = c.shape[0]
    n = c.shape[1]
    u = np.zeros(rows + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=np.intp)   # p[j]: row matched to column j
    way = np.zeros(n + 1, dtype=np.intp)
    cols = np.arange(1, n + 1)
    for i in range(1, rows + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used[1:]
            cur = c[i0 - 1, :] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            # argmin over free columns; ties resolve to the lowest index
            free_idx = cols[free]
            k = int(np.argmin(minv[1:][free]))
            j1 = int(free_idx[k])
            delta = minv[j1]
            u[p[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0 != 0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    sigma = [0] * rows
    for j in range(1, n + 1):
        if p[j]:
            sigma[p[j] - 1] = j - 1
    return sigma


def hungarian(cost) -> MatchResult:
    """Optimal assignment of a CostMatrix (or raw square array).

    Padded no-interaction rows are constant, so the optimum is found on the
    real rows alone; the padding rows then take the remaining columns in
    ascending order, which keeps the result a deterministic bijection.
    """
    if isinstance(cost, CostMatrix):
        cm = cost
    else:
        arr = np.asarray(cost, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
            raise InputError(f"cost matrix must be square, got {arr.shape}")
        cm = CostMatrix(arr, n_real=arr.shape[0])
    k = cm.entries.shape[0]
    partial = solve_assignment(cm.entries[:cm.n_real])
    taken = set(partial)
    rest = [j for j in range(k) if j not in taken]
    sigma = partial + rest
    total = 0.0
    per_pair = []
    for i, j in enumerate(sigma):
        total += float(cm.entries[i, j])
        pc = PairCost(i, j, float(cm.entries[i, j]))
        if cm.pointer_h is not None:
            pc.pointer_h = float(cm.pointer_h[i, j])
            pc.pointer_o = float(cm.pointer_o[i, j])
            pc.action = float(cm.action[i, j])
        per_pair.append(pc)
    return MatchResult(tuple(sigma), total, per_pair)


# ---------------------------------------------------------------------------
# detection-stage assignment (defines the instance-slot mapping)


@dataclass(frozen=True)
class PhiAssignment:
    """Injective map from ground-truth instances to instance slots."""

    slot_of_instance: tuple[int, ...]

    def slot(self, instance_id: int) -> int:
        return self.slot_of_instance[instance_id]

    @property
    def instance_of_slot(self) -> dict[int, int]:
        return {s: i for i, s in enumerate(self.slot_of_instance)}


def assign_detection(pred_boxes: np.ndarray, cat_probs: np.ndarray,
                     gt_boxes: np.ndarray, gt_cats: np.ndarray,
                     reserved_slot: Optional[int] = None,
                     l1_weight: float = 5.0,
                     cls_weight: float = 1.0) -> PhiAssignment:
    """Hungarian assignment of ground-truth instances to instance slots.

    Cost per (gt, slot): l1_weight * L1(boxes) - cls_weight * p(category).
    The reserved occluded-target slot never receives a real instance.
    """
    pred_boxes = np.asarray(pred_boxes, dtype=np.float64)
    cat_probs = np.asarray(cat_probs, dtype=np.float64)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    n_slots = pred_boxes.shape[0]
    usable = [s for s in range(n_slots) if s != reserved_slot]
    n_gt = len(gt_cats)
    if n_gt > len(usable):
        raise CapacityError(
            f"{n_gt} ground-truth instances exceed the {len(usable)} usable "
            f"instance slots (slot {reserved_slot} is reserved)")
    if n_gt == 0:
        return PhiAssignment(())
    up = pred_boxes[usable]                              # (usable, 4)
    l1 = np.abs(gt_boxes[:, None, :] - up[None, :, :]).sum(axis=2)
    probs = cat_probs[usable][:, np.asarray(gt_cats, dtype=np.intp)].T
    sigma = solve_assignment(l1_weight * l1 - cls_weight * probs)
    return PhiAssignment(tuple(usable[sigma[i]] for i in range(n_gt)))


# ---------------------------------------------------------------------------
# interaction matching cost


def bce_mean(labels: np.ndarray, logits: np.ndarray) -> float:
    """Mean clamped binary cross-entropy over the action slots."""
    s = 1.0 / (1.0 + np.exp(-np.asarray(logits, dtype=np.float64)))
    p = np.clip(s, _BCE_EPS, 1.0 - _BCE_EPS)
    t = np.asarray(labels, dtype=np.float64)
    return float(np.mean(-(t * np.log(p) + (1.0 - t) * np.log1p(-p))))


def hoi_match_cost(gt_labels: Sequence[np.ndarray], c_h: Sequence[int],
                   c_o: Sequence[int], p_h: np.ndarray, p_o: np.ndarray,
                   act_logits: np.ndarray, alpha: float = 1.0,
                   beta: float = 1.0) -> CostMatrix:
    """Matching cost between padded ground truth and the K predictions.

    Entry (i, s) for a real ground-truth pair i with converted slot indices
    (c_h[i], c_o[i]) is

        -alpha * p_h[s, c_h[i]] - beta * p_o[s, c_o[i]] + BCE(labels_i, act_s)

    and 0 for the padded no-interaction rows.
    """
    k = act_logits.shape[0]
    n = p_h.shape[1]
    n_real = len(c_h)
    if n_real > k:
        raise CapacityError(f"{n_real} ground-truth pairs exceed K={k}")
    ph = np.zeros((k, k))
    po = np.zeros((k, k))
    act = np.zeros((k, k))
    if n_real:
        ch = np.asarray(c_h, dtype=np.intp)
        co = np.asarray(c_o, dtype=np.intp)
        if ch.min() < 0 or ch.max() >= n or co.min() < 0 or co.max() >= n:
            raise InputError(f"converted gt indices outside [0, {n}): "
                             f"h={list(c_h)}, o={list(c_o)}")
        ph[:n_real] = -alpha * p_h[:, ch].T
        po[:n_real] = -beta * p_o[:, co].T
        # (n_real, K) grid of mean BCEs via broadcasting
        s = 1.0 / (1.0 + np.exp(-np.asarray(act_logits, dtype=np.float64)))
        p = np.clip(s, _BCE_EPS, 1.0 - _BCE_EPS)
        t = np.asarray(gt_labels, dtype=np.float64)[:n_real, None, :]
        act[:n_real] = -(t * np.log(p)[None, :, :]
                         + (1.0 - t) * np.log1p(-p)[None, :, :]).mean(axis=2)
    return CostMatrix(ph + po + act, n_real, ph, po, act)


def direct_match_cost(gt_hboxes: np.ndarray, gt_oboxes: np.ndarray,
                      gt_labels: Sequence[np.ndarray], pred_hboxes: np.ndarray,
                      pred_oboxes: np.ndarray, act_logits: np.ndarray,
                      box_weight: float = 1.0) -> CostMatrix:
    """Matching cost for the direct box-regression ablation."""
    k = act_logits.shape[0]
    n_real = len(gt_labels)
    if n_real > k:
        raise CapacityError(f"{n_real} ground-truth pairs exceed K={k}")
    entries = np.zeros((k, k))
    for i in range(n_real):
        for s in range(k):
            box_term = (l1_box_distance(pred_hboxes[s], gt_hboxes[i])
                        + l1_box_distance(pred_oboxes[s], gt_oboxes[i]))
            entries[i, s] = (box_weight * box_term
                             + bce_mean(gt_labels[i], act_logits[s]))
    return CostMatrix(entries, n_real)
