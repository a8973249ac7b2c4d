"""Two-stage optimization.

Stage 1 pretrains the detection path (encoder, instance decoder, box and
category heads) on synthetic detection, standing in for an external
pretrained detector. Stage 2 freezes that path bitwise and trains the
interaction decoder plus the pointer/action heads with the Hungarian set
loss. When the frozen set covers the whole detection path, stage 2 caches
the encoder memory and instance outputs per scene, which is what makes the
desk-scale budget comfortable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import tensor as tz
from .data import OCCLUDED, Scene, instance_arrays, rasterize, triplet_label_vector
from .errors import InputError, TrainingDiverged
from .loss import (LossConfig, LossReport, detection_loss,
                   direct_regression_loss, hungarian_loss)
from .matching import (assign_detection, direct_match_cost, hoi_match_cost,
                       hungarian)
from .model import Model, ModelConfig
from .pointer import pointer_probabilities
from .tensor import GradientTape

DETECTION_PREFIXES = ("input_proj.", "enc.", "inst_queries", "dec_i.",
                      "head_box.", "head_class.")


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4            # stage-2 (interaction) rate
    stage1_learning_rate: float = 3e-3     # detection pretraining rate
    weight_decay: float = 1e-4
    batch_size: int = 32
    epochs_stage1: int = 30
    epochs_stage2: int = 40
    seed: int = 0
    grad_clip: float = 1.0
    detection_ap_floor: float = 0.5
    # None -> freeze the whole detection path; () -> freeze nothing
    frozen_stage2: Optional[tuple[str, ...]] = None


@dataclass
class TrainResult:
    model: Model
    history: list[dict] = field(default_factory=list)


class AdamW:
    """Adaptive moments with decoupled weight decay.

    Decay applies to every non-frozen parameter each step, including ones
    that received no gradient; frozen parameters are never touched.
    """

    def __init__(self, params: dict[str, np.ndarray], lr: float,
                 weight_decay: float = 0.0, betas=(0.9, 0.999),
                 eps: float = 1e-8, frozen: Sequence[str] = ()):
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.frozen = set(frozen)
        self.names = [n for n in params if n not in self.frozen]
        self.m = {n: np.zeros_like(params[n]) for n in self.names}
        self.v = {n: np.zeros_like(params[n]) for n in self.names}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray]):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for n in self.names:
            g = grads.get(n)
            p = self.params[n]
            if g is not None:
                self.m[n] = self.b1 * self.m[n] + (1.0 - self.b1) * g
                self.v[n] = self.b2 * self.v[n] + (1.0 - self.b2) * g * g
            else:
                self.m[n] = self.b1 * self.m[n]
                self.v[n] = self.b2 * self.v[n]
            update = (self.m[n] / c1) / (np.sqrt(self.v[n] / c2) + self.eps)
            self.params[n] = p - self.lr * update - self.lr * self.weight_decay * p


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if max_norm > 0.0 and total > max_norm:
        fac = max_norm / total
        for n in grads:
            grads[n] = grads[n] * fac
    return total


def _expand_prefixes(params: dict, prefixes: Sequence[str]) -> set[str]:
    return {n for n in params
            if any(n == p or n.startswith(p) for p in prefixes)}


def detection_param_names(params: dict) -> set[str]:
    return _expand_prefixes(params, DETECTION_PREFIXES)


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        # per-batch losses are summed in ascending scene order
        yield sorted(int(j) for j in order[i:i + batch_size])


def _check_finite_loss(value: float, scene_id: int):
    if not np.isfinite(value):
        raise TrainingDiverged(f"non-finite loss at scene {scene_id}")


def _grads_by_name(tape: GradientTape, bound: dict, total, trainable: set,
                   scene_ids: Sequence[int]) -> dict[str, np.ndarray]:
    raw = tape.gradients(total)
    grads = {}
    for name in trainable:
        g = raw.get(bound[name])
        if g is None:
            continue
        if not np.isfinite(g).all():
            raise TrainingDiverged(
                f"non-finite gradient for parameter {name} "
                f"(batch scenes {list(scene_ids)})")
        grads[name] = g
    return grads


@dataclass
class _ScenePrep:
    scene: Scene
    tokens: np.ndarray
    gt_boxes: np.ndarray
    gt_cats: np.ndarray
    labels: np.ndarray          # (n_triplets, gamma)
    humans: list[int]
    objects: list[int]          # instance ids, OCCLUDED for hidden targets


def prepare_scene(scene: Scene, cfg: ModelConfig) -> _ScenePrep:
    gt_boxes, gt_cats = instance_arrays(scene)
    labels = np.array([triplet_label_vector(t, cfg.n_actions)
                       for t in scene.triplets]).reshape(-1, cfg.n_actions)
    return _ScenePrep(
        scene=scene,
        tokens=rasterize(scene, cfg.grid, cfg.n_categories),
        gt_boxes=gt_boxes,
        gt_cats=gt_cats,
        labels=labels,
        humans=[t.human for t in scene.triplets],
        objects=[t.object for t in scene.triplets],
    )


def _softmax_np(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# stage 1: detection pretraining


def train_stage1(scenes: Sequence[Scene], model_cfg: ModelConfig,
                 train_cfg: TrainConfig,
                 loss_cfg: Optional[LossConfig] = None) -> TrainResult:
    loss_cfg = loss_cfg or LossConfig()
    loss_cfg.validate()
    model = Model(model_cfg, init_seed=train_cfg.seed)
    preps = [prepare_scene(s, model_cfg) for s in scenes]
    for p in preps:
        if len(p.gt_cats) > model_cfg.n_instance_slots - 1:
            raise InputError(f"scene {p.scene.scene_id} has {len(p.gt_cats)} "
                             f"instances, capacity is "
                             f"{model_cfg.n_instance_slots - 1}")
    trainable = detection_param_names(model.params)
    opt = AdamW(model.params, lr=train_cfg.stage1_learning_rate,
                weight_decay=train_cfg.weight_decay,
                frozen=set(model.params) - trainable)
    rng = np.random.default_rng(train_cfg.seed)
    history = []
    for epoch in range(train_cfg.epochs_stage1):
        losses = []
        for batch in _batches(len(preps), train_cfg.batch_size, rng):
            tape = GradientTape()
            bound = model.bind(tape, trainable)
            toks = tz.const(np.stack([preps[i].tokens for i in batch]))
            det = model.decode_instances(bound, model.encode(bound, toks))
            total = None
            for bi, si in enumerate(batch):
                prep = preps[si]
                cat_logits = tz.index0(det["cat_logits"], bi)
                boxes = tz.index0(det["boxes"], bi)
                box_logits = tz.index0(det["box_logits"], bi)
                phi = assign_detection(boxes.array,
                                       _softmax_np(cat_logits.array),
                                       prep.gt_boxes, prep.gt_cats,
                                       reserved_slot=model_cfg.occluded_slot,
                                       l1_weight=loss_cfg.det_l1_weight,
                                       cls_weight=loss_cfg.det_cls_weight)
                sl, val = detection_loss(cat_logits, boxes, box_logits,
                                         prep.gt_boxes, prep.gt_cats, phi,
                                         loss_cfg, model_cfg.occluded_slot)
                _check_finite_loss(val, prep.scene.scene_id)
                total = sl if total is None else tz.add(total, sl)
            total = tz.scale(total, 1.0 / len(batch))
            losses.append(float(total.array))
            grads = _grads_by_name(tape, bound, total, trainable,
                                   [preps[i].scene.scene_id for i in batch])
            clip_global_norm(grads, train_cfg.grad_clip)
            opt.step(grads)
        history.append({"stage": 1, "epoch": epoch,
                        "loss": float(np.mean(losses)),
                        "detection": float(np.mean(losses)),
                        "loc": 0.0, "act": 0.0})
    return TrainResult(model, history)


# ---------------------------------------------------------------------------
# stage 2: interaction training with a frozen detection path


def convert_triplet_indices(prep: _ScenePrep, phi, occluded_slot: int):
    c_h = [phi.slot(h) for h in prep.humans]
    c_o = [occluded_slot if o == OCCLUDED else phi.slot(o)
           for o in prep.objects]
    return c_h, c_o


def _gt_boxes_for_direct(prep: _ScenePrep):
    hb = np.array([prep.gt_boxes[h] for h in prep.humans]).reshape(-1, 4)
    ob = np.array([np.zeros(4) if o == OCCLUDED else prep.gt_boxes[o]
                   for o in prep.objects]).reshape(-1, 4)
    return hb, ob


def train_stage2(model: Model, scenes: Sequence[Scene],
                 train_cfg: TrainConfig,
                 loss_cfg: Optional[LossConfig] = None,
                 val_scenes: Optional[Sequence[Scene]] = None) -> TrainResult:
    loss_cfg = loss_cfg or LossConfig()
    loss_cfg.validate()
    cfg = model.cfg
    if val_scenes is not None and train_cfg.detection_ap_floor > 0.0:
        from .evaluation import detection_ap
        ap = detection_ap(model, val_scenes)
        if ap < train_cfg.detection_ap_floor:
            raise InputError(f"stage-1 detection AP {ap:.3f} is below the "
                             f"floor {train_cfg.detection_ap_floor:.3f}")

    if train_cfg.frozen_stage2 is None:
        frozen = detection_param_names(model.params)
    else:
        frozen = _expand_prefixes(model.params, train_cfg.frozen_stage2)
    trainable = set(model.params) - frozen
    frozen_snapshot = {n: model.params[n].copy() for n in frozen}

    detection_frozen = detection_param_names(model.params) <= frozen
    preps = [prepare_scene(s, cfg) for s in scenes]

    cache = []
    if detection_frozen:
        bound = model.bind()
        for prep in preps:
            toks = tz.const(prep.tokens)
            memory = model.encode(bound, toks, "enc")
            det = model.decode_instances(bound, memory)
            phi = assign_detection(det["boxes"].array,
                                   _softmax_np(det["cat_logits"].array),
                                   prep.gt_boxes, prep.gt_cats,
                                   reserved_slot=cfg.occluded_slot,
                                   l1_weight=loss_cfg.det_l1_weight,
                                   cls_weight=loss_cfg.det_cls_weight)
            c_h, c_o = convert_triplet_indices(prep, phi, cfg.occluded_slot)
            cache.append({"memory": memory.array, "mu": det["mu"].array,
                          "boxes": det["boxes"].array, "c_h": c_h, "c_o": c_o})

    opt = AdamW(model.params, lr=train_cfg.learning_rate,
                weight_decay=train_cfg.weight_decay, frozen=frozen)
    rng = np.random.default_rng(train_cfg.seed + 1)
    history = []
    for epoch in range(train_cfg.epochs_stage2):
        losses, locs, acts = [], [], []
        for batch in _batches(len(preps), train_cfg.batch_size, rng):
            tape = GradientTape()
            bound = model.bind(tape, trainable)
            if detection_frozen:
                if cfg.shared_encoder:
                    intx_memory = tz.const(
                        np.stack([cache[i]["memory"] for i in batch]))
                else:
                    toks = tz.const(np.stack([preps[i].tokens for i in batch]))
                    intx_memory = model.encode(bound, toks, "enc2")
                intx = model.decode_interactions(bound, intx_memory)
                full = None
            else:
                toks = tz.const(np.stack([preps[i].tokens for i in batch]))
                full = model.forward(bound, toks)
                intx = full
            total = None
            for bi, si in enumerate(batch):
                prep = preps[si]
                if detection_frozen:
                    mu_t = tz.const(cache[si]["mu"])
                    c_h, c_o = cache[si]["c_h"], cache[si]["c_o"]
                else:
                    mu_t = tz.index0(full["mu"], bi)
                    boxes_v = tz.index0(full["boxes"], bi).array
                    cat_v = tz.index0(full["cat_logits"], bi).array
                    phi = assign_detection(boxes_v, _softmax_np(cat_v),
                                           prep.gt_boxes, prep.gt_cats,
                                           reserved_slot=cfg.occluded_slot,
                                           l1_weight=loss_cfg.det_l1_weight,
                                           cls_weight=loss_cfg.det_cls_weight)
                    c_h, c_o = convert_triplet_indices(prep, phi,
                                                       cfg.occluded_slot)
                act_l = tz.index0(intx["act_logits"], bi)
                if cfg.direct_regression:
                    hb = tz.index0(intx["hbox_logits"], bi)
                    ob = tz.index0(intx["obox_logits"], bi)
                    gt_hb, gt_ob = _gt_boxes_for_direct(prep)
                    cost = direct_match_cost(
                        gt_hb, gt_ob, prep.labels,
                        1.0 / (1.0 + np.exp(-hb.array)),
                        1.0 / (1.0 + np.exp(-ob.array)),
                        act_l.array, box_weight=loss_cfg.direct_box_weight)
                    match = hungarian(cost)
                    sl, rep = direct_regression_loss(
                        hb, ob, act_l, gt_hb, gt_ob, prep.labels, match,
                        loss_cfg)
                else:
                    v_h = tz.index0(intx["v_h"], bi)
                    v_o = tz.index0(intx["v_o"], bi)
                    probs = pointer_probabilities(v_h.array, v_o.array,
                                                  mu_t.array, loss_cfg.tau_p)
                    cost = hoi_match_cost(prep.labels, c_h, c_o, probs.p_h,
                                          probs.p_o, act_l.array,
                                          loss_cfg.alpha, loss_cfg.beta)
                    match = hungarian(cost)
                    sl, rep = hungarian_loss(v_h, v_o, act_l, mu_t,
                                             prep.labels, c_h, c_o, match,
                                             loss_cfg)
                _check_finite_loss(rep.total, prep.scene.scene_id)
                locs.append(rep.loc)
                acts.append(rep.act)
                total = sl if total is None else tz.add(total, sl)
            total = tz.scale(total, 1.0 / len(batch))
            losses.append(float(total.array))
            grads = _grads_by_name(tape, bound, total, trainable,
                                   [preps[i].scene.scene_id for i in batch])
            clip_global_norm(grads, train_cfg.grad_clip)
            opt.step(grads)
        history.append({"stage": 2, "epoch": epoch,
                        "loss": float(np.mean(losses)),
                        "loc": float(np.mean(locs)) if locs else 0.0,
                        "act": float(np.mean(acts)) if acts else 0.0,
                        "detection": 0.0})
    for n, snap in frozen_snapshot.items():
        if not np.array_equal(model.params[n], snap):
            raise TrainingDiverged(f"frozen parameter {n} changed during stage 2")
    return TrainResult(model, history)


# ---------------------------------------------------------------------------
# gradient audit


@dataclass
class AuditReport:
    max_relative_error: float
    per_tensor: dict[str, float]
    n_scenes: int
    excluded: tuple[str, ...]


def _scene_loss_value(model: Model, prep: _ScenePrep, cache_entry: dict,
                      match, loss_cfg: LossConfig,
                      override: Optional[tuple[str, np.ndarray]] = None) -> float:
    """Loss with the matching held fixed, optionally overriding one tensor."""
    params = model.params
    if override is not None:
        params = dict(params)
        params[override[0]] = override[1]
    m = Model(model.cfg, params)
    bound = m.bind()
    out = m.forward(bound, tz.const(prep.tokens))
    mu_t = out["mu"]
    total, _ = hungarian_loss(out["v_h"], out["v_o"], out["act_logits"], mu_t,
                              prep.labels, cache_entry["c_h"],
                              cache_entry["c_o"], match, loss_cfg)
    return float(total.array)


def run_gradient_audit(model: Model, scenes: Sequence[Scene],
                       loss_cfg: Optional[LossConfig] = None,
                       eps: float = 1e-5,
                       coords_per_tensor: Optional[int] = None,
                       audit_seed: int = 0) -> AuditReport:
    """Compare analytic and central-difference gradients of the set loss.

    The matching permutation and the slot assignment are held fixed at the
    base point, which makes the loss a smooth function of the weights.
    Frozen (non-interaction) tensors are excluded: the audit covers exactly
    what stage 2 trains, plus everything reachable through the loss graph.
    """
    loss_cfg = loss_cfg or LossConfig()
    cfg = model.cfg
    trainable = sorted(set(model.params) - detection_param_names(model.params))
    excluded = tuple(sorted(detection_param_names(model.params)))
    rng = np.random.default_rng(audit_seed)

    worst = 0.0
    per_tensor: dict[str, float] = {}
    for scene in scenes:
        prep = prepare_scene(scene, cfg)
        base_bound = model.bind()
        base = model.forward(base_bound, tz.const(prep.tokens))
        phi = assign_detection(base["boxes"].array,
                               _softmax_np(base["cat_logits"].array),
                               prep.gt_boxes, prep.gt_cats,
                               reserved_slot=cfg.occluded_slot)
        c_h, c_o = convert_triplet_indices(prep, phi, cfg.occluded_slot)
        probs = pointer_probabilities(base["v_h"].array, base["v_o"].array,
                                      base["mu"].array, loss_cfg.tau_p)
        cost = hoi_match_cost(prep.labels, c_h, c_o, probs.p_h, probs.p_o,
                              base["act_logits"].array, loss_cfg.alpha,
                              loss_cfg.beta)
        match = hungarian(cost)
        entry = {"c_h": c_h, "c_o": c_o}

        tape = GradientTape()
        bound = model.bind(tape, set(trainable))
        out = model.forward(bound, tz.const(prep.tokens))
        total, _ = hungarian_loss(out["v_h"], out["v_o"], out["act_logits"],
                                  out["mu"], prep.labels, c_h, c_o, match,
                                  loss_cfg)
        grads = tape.gradients(total)

        for name in trainable:
            analytic = grads[bound[name]].reshape(-1)
            arr = model.params[name]
            flat_idx = np.arange(arr.size)
            if coords_per_tensor is not None and arr.size > coords_per_tensor:
                flat_idx = rng.choice(arr.size, coords_per_tensor,
                                      replace=False)
            for idx in flat_idx:
                pert = arr.reshape(-1).copy()
                pert[idx] += eps
                hi = _scene_loss_value(model, prep, entry, match, loss_cfg,
                                       (name, pert.reshape(arr.shape)))
                pert[idx] -= 2.0 * eps
                lo = _scene_loss_value(model, prep, entry, match, loss_cfg,
                                       (name, pert.reshape(arr.shape)))
                numeric = (hi - lo) / (2.0 * eps)
                a = float(analytic[idx])
                err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
                per_tensor[name] = max(per_tensor.get(name, 0.0), err)
                worst = max(worst, err)
    return AuditReport(worst, per_tensor, len(scenes), excluded)
