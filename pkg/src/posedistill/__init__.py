"""Two-stage pose distillation on SimCC keypoint heads, at desk scale."""
from .codec import KeypointSet, PoseLogits, SimCCConfig, SimCCTarget, decode, encode
from .losses import DistillConfig
from .model import ModelConfig, init_model, load_checkpoint, save_checkpoint
from .trainers import RunRecord, TrainConfig, distill_stage1, distill_stage2, train_scratch

__all__ = [
    "DistillConfig",
    "KeypointSet",
    "ModelConfig",
    "PoseLogits",
    "RunRecord",
    "SimCCConfig",
    "SimCCTarget",
    "TrainConfig",
    "decode",
    "distill_stage1",
    "distill_stage2",
    "encode",
    "init_model",
    "load_checkpoint",
    "save_checkpoint",
    "train_scratch",
]
__version__ = "0.1.0"
