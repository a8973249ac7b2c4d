"""Training losses: pointer localization, action BCE, the Hungarian set
loss over matched pairs, and the detection loss used for pretraining.

All losses build tape graphs through :mod:`hoidet.tensor`, so the same code
path yields both the scalar values checked against oracles in the tests and
the gradients used by the trainer.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as tz
from .matching import MatchResult, PhiAssignment
from .tensor import Tensor


@dataclass
class LossConfig:
    tau: float = 0.1              # pointer softmax temperature
    alpha: float = 1.0            # matching-cost weight, human pointer
    beta: float = 1.0             # matching-cost weight, object pointer
    tau_p: float = 0.1            # temperature of the matching-cost softmax
    loc_weight: float = 1.0
    act_weight: float = 1.0
    # weight of the interactiveness-suppression terms on unmatched slots
    no_interaction_weight: float = 1.0
    det_l1_weight: float = 5.0
    det_cls_weight: float = 1.0
    det_no_object_weight: float = 0.1
    det_reserved_weight: float = 0.2
    reserved_margin: float = 9.0  # drive reserved-slot box logits below -margin
    direct_box_weight: float = 2.0

    def validate(self):
        if self.tau <= 0.0 or self.tau_p <= 0.0:
            raise ValueError("temperatures must be positive")
        for name in ("alpha", "beta", "loc_weight", "act_weight",
                     "no_interaction_weight", "det_l1_weight",
                     "det_cls_weight", "det_no_object_weight"):
            if getattr(self, name) < 0.0:
                raise ValueError(f"{name} must be non-negative")


@dataclass
class LossReport:
    total: float = 0.0
    loc: float = 0.0
    act: float = 0.0
    detection: float = 0.0


def localization_loss(v_h: Tensor, v_o: Tensor, mu, c_h: Sequence[int],
                      c_o: Sequence[int], tau: float = 0.1) -> Tensor:
    """Contrastive slot-pointing loss, summed over the matched pairs.

    For each pair: cross-entropy of softmax(cos(v, mu_k) / tau) against the
    converted ground-truth slot, once for the human side and once for the
    object side. Zero exactly when there is a single candidate slot.
    """
    inv = 1.0 / tau
    ce_h = tz.ce_rows(tz.scale(tz.cosine_matrix(v_h, mu), inv), c_h)
    ce_o = tz.ce_rows(tz.scale(tz.cosine_matrix(v_o, mu), inv), c_o)
    return tz.add(tz.vsum(ce_h), tz.vsum(ce_o))


def action_loss(labels, logits) -> Tensor:
    """Mean clamped binary cross-entropy over the action slots."""
    return tz.bce_with_logits(logits, labels)


def hungarian_loss(v_h: Tensor, v_o: Tensor, act_logits: Tensor, mu,
                   gt_labels: np.ndarray, c_h: Sequence[int],
                   c_o: Sequence[int], match: MatchResult,
                   cfg: LossConfig) -> tuple[Tensor, LossReport]:
    """Set loss over the matched permutation.

    Matched pairs contribute the localization loss plus full-label action
    BCE; every unmatched prediction contributes only the interactiveness
    suppression term (slot 0 trained toward 0).
    """
    k = act_logits.shape[0]
    n_real = len(c_h)
    matched = [match.sigma[i] for i in range(n_real)]
    unmatched = [s for s in range(k) if s not in set(matched)]

    parts = []
    loc_val = 0.0
    act_val = 0.0
    if n_real:
        loc = localization_loss(tz.take_rows(v_h, matched),
                                tz.take_rows(v_o, matched),
                                mu, c_h, c_o, cfg.tau)
        act_m = tz.scale(tz.bce_with_logits(tz.take_rows(act_logits, matched),
                                            np.asarray(gt_labels)[:n_real]),
                         float(n_real))
        parts.append(tz.scale(loc, cfg.loc_weight))
        parts.append(tz.scale(act_m, cfg.act_weight))
        loc_val = float(loc.array)
        act_val = float(act_m.array)
    if unmatched:
        inter = tz.take_rows(tz.col(act_logits, 0), unmatched)
        act_e = tz.scale(tz.bce_with_logits(inter, np.zeros(len(unmatched))),
                         len(unmatched) * cfg.no_interaction_weight)
        parts.append(tz.scale(act_e, cfg.act_weight))
        act_val += float(act_e.array)

    total = parts[0]
    for p in parts[1:]:
        total = tz.add(total, p)
    report = LossReport(total=float(total.array), loc=loc_val, act=act_val)
    return total, report


def detection_loss(cat_logits: Tensor, boxes: Tensor, box_logits: Tensor,
                   gt_boxes: np.ndarray, gt_cats: np.ndarray,
                   phi: PhiAssignment, cfg: LossConfig,
                   reserved_slot: int) -> tuple[Tensor, float]:
    """Category cross-entropy plus L1 box loss on the matched slots.

    Unmatched slots are supervised toward the no-object class at reduced
    weight; the reserved occluded-target slot additionally gets a hinge
    pushing its box logits below -reserved_margin so its decoded box
    collapses onto the zero sentinel.
    """
    n_slots = cat_logits.shape[0]
    n_cats = cat_logits.shape[1] - 1
    n_gt = len(gt_cats)
    targets = np.full(n_slots, n_cats, dtype=np.intp)
    weights = np.full(n_slots, cfg.det_no_object_weight)
    slots = [phi.slot(i) for i in range(n_gt)]
    for i, s in enumerate(slots):
        targets[s] = int(gt_cats[i])
        weights[s] = 1.0
    ce = tz.vsum(tz.mul(tz.ce_rows(cat_logits, targets), tz.const(weights)))
    total = tz.scale(ce, cfg.det_cls_weight / weights.sum())
    if n_gt:
        l1 = tz.l1_to_const(tz.take_rows(boxes, slots), np.asarray(gt_boxes))
        total = tz.add(total, tz.scale(l1, cfg.det_l1_weight / n_gt))
    hinge = tz.vsum(tz.relu(tz.add_const(
        tz.take_rows(box_logits, [reserved_slot]), cfg.reserved_margin)))
    total = tz.add(total, tz.scale(hinge, cfg.det_reserved_weight / 4.0))
    return total, float(total.array)


def direct_regression_loss(hbox_logits: Tensor, obox_logits: Tensor,
                           act_logits: Tensor, gt_hboxes: np.ndarray,
                           gt_oboxes: np.ndarray, gt_labels: np.ndarray,
                           match: MatchResult,
                           cfg: LossConfig) -> tuple[Tensor, LossReport]:
    """Set loss for the no-pointer ablation: direct box regression."""
    k = act_logits.shape[0]
    n_real = len(gt_labels)
    matched = [match.sigma[i] for i in range(n_real)]
    unmatched = [s for s in range(k) if s not in set(matched)]

    parts = []
    loc_val = 0.0
    act_val = 0.0
    if n_real:
        l1_h = tz.l1_to_const(tz.sigmoid(tz.take_rows(hbox_logits, matched)),
                              np.asarray(gt_hboxes))
        l1_o = tz.l1_to_const(tz.sigmoid(tz.take_rows(obox_logits, matched)),
                              np.asarray(gt_oboxes))
        box = tz.add(l1_h, l1_o)
        act_m = tz.scale(tz.bce_with_logits(tz.take_rows(act_logits, matched),
                                            np.asarray(gt_labels)[:n_real]),
                         float(n_real))
        parts.append(tz.scale(box, cfg.direct_box_weight))
        parts.append(tz.scale(act_m, cfg.act_weight))
        loc_val = float(box.array)
        act_val = float(act_m.array)
    if unmatched:
        inter = tz.take_rows(tz.col(act_logits, 0), unmatched)
        act_e = tz.scale(tz.bce_with_logits(inter, np.zeros(len(unmatched))),
                         len(unmatched) * cfg.no_interaction_weight)
        parts.append(tz.scale(act_e, cfg.act_weight))
        act_val += float(act_e.array)

    total = parts[0]
    for p in parts[1:]:
        total = tz.add(total, p)
    return total, LossReport(total=float(total.array), loc=loc_val, act=act_val)
