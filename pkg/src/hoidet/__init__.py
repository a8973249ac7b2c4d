"""Pointer-based set prediction for human-object interaction detection,
trained and verified end to end on synthetic scenes."""

from .data import GenConfig, Scene, generate, load_scenes, save_scenes
from .geometry import Box, iou, l1_box_distance
from .loss import LossConfig
from .model import Model, ModelConfig, load_checkpoint, save_checkpoint
from .train import TrainConfig, train_stage1, train_stage2

__version__ = "0.1.0"

__all__ = [
    "Box", "GenConfig", "LossConfig", "Model", "ModelConfig", "Scene",
    "TrainConfig", "generate", "iou", "l1_box_distance", "load_checkpoint",
    "load_scenes", "save_checkpoint", "save_scenes", "train_stage1",
    "train_stage2", "__version__",
]
