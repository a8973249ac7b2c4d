"""End-to-end orchestration: the two-stage run and the ablation grid."""

from __future__ import annotations

import csv
from dataclasses import replace
from typing import Optional, Sequence

from .data import GenConfig, Scene, generate
from .evaluation import EvalReport, ap_role, infer_scenes
from .loss import LossConfig
from .model import Model, ModelConfig
from .train import TrainConfig, TrainResult, train_stage1, train_stage2

ABLATION_VARIANTS = ("full", "no_pointers", "no_shared_encoder",
                     "no_suppression")


def train_full_pipeline(train_scenes: Sequence[Scene],
                        val_scenes: Optional[Sequence[Scene]],
                        model_cfg: ModelConfig, train_cfg: TrainConfig,
                        loss_cfg: Optional[LossConfig] = None) -> TrainResult:
    """Stage-1 detection pretraining followed by stage-2 interaction training."""
    stage1 = train_stage1(train_scenes, model_cfg, train_cfg, loss_cfg)
    stage2 = train_stage2(stage1.model, train_scenes, train_cfg, loss_cfg,
                          val_scenes=val_scenes)
    return TrainResult(stage2.model, stage1.history + stage2.history)


def evaluate_model(model: Model, scenes: Sequence[Scene], scenario: int,
                   suppress: bool = True,
                   threshold: float = 0.1) -> EvalReport:
    preds = infer_scenes(model, scenes, suppress=suppress, threshold=threshold)
    return ap_role(preds, scenes, scenario,
                   n_actions=model.cfg.n_actions)


def run_ablation(train_scenes: Sequence[Scene], val_scenes: Sequence[Scene],
                 model_cfg: ModelConfig, train_cfg: TrainConfig,
                 loss_cfg: Optional[LossConfig] = None,
                 threshold: float = 0.1) -> list[dict]:
    """Train the full model and each ablated variant at equal budget.

    ``no_suppression`` reuses the full model's weights with suppression off
    at inference (it is an inference-time toggle); the other two variants
    retrain from scratch with the same epochs, data and seeds.
    """
    rows = []
    full = train_full_pipeline(train_scenes, val_scenes, model_cfg,
                               train_cfg, loss_cfg)

    def eval_both(model, suppress):
        s1 = evaluate_model(model, val_scenes, 1, suppress, threshold)
        s2 = evaluate_model(model, val_scenes, 2, suppress, threshold)
        return s1.map, s2.map

    m1, m2 = eval_both(full.model, True)
    rows.append({"variant": "full", "map_scenario1": m1, "map_scenario2": m2})

    direct_cfg = replace(model_cfg, direct_regression=True)
    direct = train_full_pipeline(train_scenes, val_scenes, direct_cfg,
                                 train_cfg, loss_cfg)
    m1, m2 = eval_both(direct.model, True)
    rows.append({"variant": "no_pointers", "map_scenario1": m1,
                 "map_scenario2": m2})

    sep_cfg = replace(model_cfg, shared_encoder=False)
    separate = train_full_pipeline(train_scenes, val_scenes, sep_cfg,
                                   train_cfg, loss_cfg)
    m1, m2 = eval_both(separate.model, True)
    rows.append({"variant": "no_shared_encoder", "map_scenario1": m1,
                 "map_scenario2": m2})

    m1, m2 = eval_both(full.model, False)
    rows.append({"variant": "no_suppression", "map_scenario1": m1,
                 "map_scenario2": m2})
    return rows


def make_split(gen_cfg: GenConfig, n_train: int, n_val: int,
               seed: int) -> tuple[list[Scene], list[Scene]]:
    scenes = generate(n_train + n_val, gen_cfg, seed)
    return scenes[:n_train], scenes[n_train:]


def write_history_csv(history: Sequence[dict], path) -> None:
    fields = ["stage", "epoch", "loss", "loc", "act", "detection"]
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=fields, extrasaction="ignore")
        writer.writeheader()
        for row in history:
            writer.writerow(row)


def write_ablation_csv(rows: Sequence[dict], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(
            f, fieldnames=["variant", "map_scenario1", "map_scenario2"])
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
