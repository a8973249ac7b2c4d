"""Inference, role average precision under both occlusion scenarios, and the
recomposition micro-benchmark.

A prediction counts as a true positive for an action when its human box
overlaps an unmatched ground-truth human (IoU >= 0.5) carrying that action
and the object condition holds: matching object box for visible objects;
for occluded objects, Scenario 1 demands the zero sentinel box (coordinate
tolerance 1e-3) while Scenario 2 ignores the object entirely. Predictions
are ranked per action by interactiveness times action probability; score
ties break by scene id, then emission order.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .data import OCCLUDED, Scene, rasterize
from .errors import InputError, ParseError
from .geometry import Box, is_sentinel, iou
from .model import Model
from .pointer import (HOITriplet, decode_pointers, recompose,
                      recompose_direct)


@dataclass
class ScenePredictions:
    scene_id: int
    triplets: list[HOITriplet] = field(default_factory=list)


@dataclass
class ActionCounts:
    n_gt: int
    tp: list[int] = field(default_factory=list)  # 1/0 per ranked prediction
    scores: list[float] = field(default_factory=list)


@dataclass
class EvalReport:
    scenario: int
    per_action: dict[int, float] = field(default_factory=dict)
    counts: dict[int, ActionCounts] = field(default_factory=dict)

    @property
    def map(self) -> float:
        vals = [ap for ap in self.per_action.values() if ap is not None]
        return float(np.mean(vals)) if vals else 0.0

    def csv_lines(self) -> list[str]:
        lines = ["action,ap,n_gt,n_pred"]
        for a in sorted(self.per_action):
            ap = self.per_action[a]
            c = self.counts[a]
            lines.append(f"{a},{'' if ap is None else f'{ap:.6f}'},"
                         f"{c.n_gt},{len(c.tp)}")
        lines.append(f"mAP,{self.map:.6f},,")
        return lines

    def pretty(self) -> str:
        rows = [f"scenario {self.scenario}"]
        for a in sorted(self.per_action):
            ap = self.per_action[a]
            rows.append(f"  action {a:3d}  AP "
                        f"{'   n/a' if ap is None else f'{ap:.4f}'}"
                        f"  ({self.counts[a].n_gt} gt)")
        rows.append(f"  mAP {self.map:.4f}")
        return "\n".join(rows)


# ---------------------------------------------------------------------------
# inference


def infer_from_outputs(out: dict[str, np.ndarray], direct: bool,
                       suppress: bool = True,
                       threshold: float = 0.1) -> list[HOITriplet]:
    if direct:
        cands = recompose_direct(out["hbox_logits"], out["obox_logits"],
                                 out["act_logits"])
    else:
        pointers = decode_pointers(out["v_h"], out["v_o"], out["mu"])
        cands = recompose(out["boxes"], out["act_logits"], pointers)
    if not suppress:
        return cands
    survivors = cands
    if not direct:
        best: dict[tuple[int, int], HOITriplet] = {}
        for t in cands:
            cur = best.get(t.source)
            if cur is None or t.interactiveness > cur.interactiveness:
                best[t.source] = t
        survivors = [t for t in cands if best[t.source] is t]
    return [t for t in survivors if t.interactiveness >= threshold]


def infer(model: Model, scene: Scene, suppress: bool = True,
          threshold: float = 0.1) -> list[HOITriplet]:
    """Forward a scene and decode (optionally suppressed) triplets."""
    tokens = rasterize(scene, model.cfg.grid, model.cfg.n_categories)
    out = model.run(tokens)
    return infer_from_outputs(out, model.cfg.direct_regression, suppress,
                              threshold)


def infer_scenes(model: Model, scenes: Sequence[Scene], suppress: bool = True,
                 threshold: float = 0.1) -> list[ScenePredictions]:
    return [ScenePredictions(s.scene_id, infer(model, s, suppress, threshold))
            for s in scenes]


# ---------------------------------------------------------------------------
# role AP


def _interp_ap(tp_flags: Sequence[int], n_gt: int) -> Optional[float]:
    """Area under the interpolated precision-recall curve (all points)."""
    if n_gt == 0:
        return None
    if not tp_flags:
        return 0.0
    tp = np.cumsum(tp_flags)
    fp = np.cumsum(1 - np.asarray(tp_flags))
    recall = tp / n_gt
    precision = tp / np.maximum(tp + fp, 1)
    # monotone envelope from the right
    for i in range(len(precision) - 2, -1, -1):
        precision[i] = max(precision[i], precision[i + 1])
    ap = 0.0
    prev = 0.0
    for i in range(len(recall)):
        if recall[i] > prev:
            ap += (recall[i] - prev) * precision[i]
            prev = recall[i]
    return float(ap)


def ap_role(predictions: Sequence[ScenePredictions], gt_scenes: Sequence[Scene],
            scenario: int, iou_thresh: float = 0.5,
            n_actions: Optional[int] = None) -> EvalReport:
    """Per-action ranked AP over a scene set, Scenario 1 or 2 semantics."""
    if scenario not in (1, 2):
        raise InputError(f"scenario must be 1 or 2, got {scenario}")
    scenes = {s.scene_id: s for s in gt_scenes}
    if n_actions is None:
        n_actions = 1 + max((max(t.actions) for s in gt_scenes
                             for t in s.triplets), default=1)
    for preds in predictions:
        for t in preds.triplets:
            if len(t.action_scores) != n_actions - 1:
                raise InputError(
                    f"prediction in scene {preds.scene_id} carries "
                    f"{len(t.action_scores)} action scores, expected "
                    f"{n_actions - 1}")

    report = EvalReport(scenario=scenario)
    for action in range(1, n_actions):
        gt_index = {}
        for s in gt_scenes:
            idxs = [i for i, t in enumerate(s.triplets) if action in t.actions]
            if idxs:
                gt_index[s.scene_id] = idxs
        n_gt = sum(len(v) for v in gt_index.values())

        entries = []
        for preds in predictions:
            for order, t in enumerate(preds.triplets):
                score = t.interactiveness * float(t.action_scores[action - 1])
                entries.append((score, preds.scene_id, order, t))
        entries.sort(key=lambda e: (-e[0], e[1], e[2]))

        matched: set[tuple[int, int]] = set()
        flags = []
        scores = []
        for score, scene_id, _, t in entries:
            scores.append(score)
            flags.append(1 if _try_match(t, scene_id, scenes, gt_index,
                                         matched, scenario, iou_thresh)
                         else 0)
        report.per_action[action] = _interp_ap(flags, n_gt)
        report.counts[action] = ActionCounts(n_gt, flags, scores)
    return report


def _try_match(pred: HOITriplet, scene_id: int, scenes: dict,
               gt_index: dict, matched: set, scenario: int,
               iou_thresh: float) -> bool:
    scene = scenes.get(scene_id)
    if scene is None or scene_id not in gt_index:
        return False
    best = None
    best_iou = -1.0
    for ti in gt_index[scene_id]:
        if (scene_id, ti) in matched:
            continue
        gt = scene.triplets[ti]
        h_iou = iou(pred.human_box, scene.instances[gt.human].box)
        if h_iou < iou_thresh:
            continue
        if gt.object == OCCLUDED:
            if scenario == 1 and not is_sentinel(pred.object_box):
                continue
        else:
            if iou(pred.object_box, scene.instances[gt.object].box) < iou_thresh:
                continue
        if h_iou > best_iou:
            best_iou = h_iou
            best = ti
    if best is None:
        return False
    matched.add((scene_id, best))
    return True


# ---------------------------------------------------------------------------
# detection AP (stage-1 quality gate)


def detection_ap(model: Model, scenes: Sequence[Scene],
                 iou_thresh: float = 0.5) -> float:
    """Category-mean AP of the instance path at the given IoU threshold."""
    cfg = model.cfg
    per_scene = []
    for s in scenes:
        out = model.run(rasterize(s, cfg.grid, cfg.n_categories))
        logits = out["cat_logits"]
        z = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(z)
        per_scene.append((s, out["boxes"], e / e.sum(axis=1, keepdims=True)))

    aps = []
    for cat in range(cfg.n_categories):
        n_gt = sum(sum(1 for inst in s.instances if inst.category == cat)
                   for s, _, _ in per_scene)
        if n_gt == 0:
            continue
        entries = []
        for s, boxes, probs in per_scene:
            for slot in range(cfg.n_instance_slots):
                if slot == cfg.occluded_slot:
                    continue
                entries.append((float(probs[slot, cat]), s.scene_id, slot,
                                boxes[slot], s))
        entries.sort(key=lambda e: (-e[0], e[1], e[2]))
        matched = set()
        flags = []
        for score, scene_id, slot, box, s in entries:
            best, best_iou = None, -1.0
            for i, inst in enumerate(s.instances):
                if inst.category != cat or (scene_id, i) in matched:
                    continue
                v = iou(box, inst.box)
                if v >= iou_thresh and v > best_iou:
                    best, best_iou = i, v
            if best is None:
                flags.append(0)
            else:
                matched.add((scene_id, best))
                flags.append(1)
        aps.append(_interp_ap(flags, n_gt))
    return float(np.mean(aps)) if aps else 0.0


# ---------------------------------------------------------------------------
# prediction persistence


def save_predictions(predictions: Sequence[ScenePredictions], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for p in predictions:
            obj = {"scene_id": p.scene_id, "triplets": [
                {"h_box": [t.human_box.cx, t.human_box.cy,
                           t.human_box.w, t.human_box.h],
                 "o_box": [t.object_box.cx, t.object_box.cy,
                           t.object_box.w, t.object_box.h],
                 "actions": [{"id": a + 1, "score": float(sc)}
                             for a, sc in enumerate(t.action_scores)],
                 "interactiveness": t.interactiveness,
                 "h_idx": t.source[0], "o_idx": t.source[1]}
                for t in p.triplets]}
            f.write(json.dumps(obj, separators=(",", ":")))
            f.write("\n")


def load_predictions(path) -> list[ScenePredictions]:
    out = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                triplets = []
                for t in obj["triplets"]:
                    acts = sorted(t["actions"], key=lambda a: a["id"])
                    triplets.append(HOITriplet(
                        Box(*(float(v) for v in t["h_box"])),
                        Box(*(float(v) for v in t["o_box"])),
                        np.array([a["score"] for a in acts]),
                        float(t["interactiveness"]),
                        (int(t["h_idx"]), int(t["o_idx"])),
                    ))
                out.append(ScenePredictions(int(obj["scene_id"]), triplets))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise ParseError(f"{path}: line {lineno}: {e}") from e
    return out


# ---------------------------------------------------------------------------
# recomposition micro-benchmark


def bench_recompose(ks: Sequence[int], ns: Sequence[int], ds: Sequence[int],
                    repeats: int = 5, n_actions: int = 8,
                    seed: int = 0) -> list[dict]:
    """Median wall time of pointer decode + recomposition per (K, N, d)."""
    rng = np.random.default_rng(seed)
    rows = []
    for d in ds:
        for k in ks:
            for n in ns:
                v_h = rng.standard_normal((k, d))
                v_o = rng.standard_normal((k, d))
                mu = rng.standard_normal((n, d))
                boxes = rng.random((n, 4))
                act = rng.standard_normal((k, n_actions))
                times = []
                for _ in range(max(repeats, 1)):
                    t0 = time.perf_counter()
                    pointers = decode_pointers(v_h, v_o, mu)
                    recompose(boxes, act, pointers)
                    times.append(time.perf_counter() - t0)
                rows.append({"K": k, "N": n, "d": d, "repeats": repeats,
                             "median_s": float(np.median(times))})
    return rows


def linear_fit_r2(xs: Sequence[float], ys: Sequence[float]) -> tuple[float, float]:
    """Least-squares slope through the origin and its R^2 against the mean."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    slope = float((x * y).sum() / (x * x).sum())
    resid = y - slope * x
    ss_res = float((resid * resid).sum())
    ss_tot = float(((y - y.mean()) ** 2).sum())
    return slope, 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
