"""Small SimCC pose estimator with a separable backbone and head.

The backbone is a strided conv stack producing a C x H x W feature map; the
head maps that feature map to per-keypoint x/y bin scores. A 1x1 conv
projection bridges student and teacher feature widths for feature
distillation.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .codec import PoseLogits, SimCCConfig

CHECKPOINT_MAGIC = b"POSEDISTILL-CKPT 1\n"


class ContractError(ValueError):
    """Raised when tensors handed to a model op violate its shape contract."""


@dataclass
class ModelConfig:
    backbone_channels: list[int] = field(default_factory=lambda: [8, 16])
    feature_dim: int = 16
    head_hidden: int = 64
    num_keypoints: int = 23
    simcc: SimCCConfig = field(default_factory=SimCCConfig)
    init_seed: int = 0
    # index into the backbone stage outputs used for feature distillation
    feature_tap: int = -1

    def __post_init__(self):
        if isinstance(self.simcc, dict):
            self.simcc = SimCCConfig(**self.simcc)
        self.backbone_channels = [int(c) for c in self.backbone_channels]
        widths = [*self.backbone_channels, self.feature_dim, self.head_hidden, self.num_keypoints]
        if not self.backbone_channels or min(widths) < 1:
            raise ValueError(f"all model widths must be >= 1, got {widths}")

    @property
    def stride(self) -> int:
        return 2 ** len(self.backbone_channels)

    @property
    def feature_hw(self) -> tuple[int, int]:
        h, w = self.simcc.input_height, self.simcc.input_width
        for _ in self.backbone_channels:
            h, w = (h + 1) // 2, (w + 1) // 2
        return h, w

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


class Backbone(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        layers = []
        c_in = 1
        for c in cfg.backbone_channels:
            layers.append(nn.Conv2d(c_in, c, 3, stride=2, padding=1))
            c_in = c
        layers.append(nn.Conv2d(c_in, cfg.feature_dim, 3, stride=1, padding=1))
        self.stages = nn.ModuleList(layers)
        self.act = nn.SiLU()

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        outs = []
        for i, conv in enumerate(self.stages):
            x = conv(x)
            if i < len(self.stages) - 1:
                x = self.act(x)
            outs.append(x)
        return outs


class SimCCHead(nn.Module):
    """1x1 conv to K maps, flatten each map, shared hidden layer, x/y classifiers."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        h, w = cfg.feature_hw
        self.to_keypoints = nn.Conv2d(cfg.feature_dim, cfg.num_keypoints, 1)
        self.hidden = nn.Linear(h * w, cfg.head_hidden)
        self.act = nn.SiLU()
        self.cls_x = nn.Linear(cfg.head_hidden, cfg.simcc.bins_x)
        self.cls_y = nn.Linear(cfg.head_hidden, cfg.simcc.bins_y)

    def forward(self, feat: torch.Tensor) -> PoseLogits:
        z = self.to_keypoints(feat).flatten(2)
        z = self.act(self.hidden(z))
        return PoseLogits(self.cls_x(z), self.cls_y(z))


def _derived_seed(seed: int, stream: int) -> int:
    return int(np.random.SeedSequence([int(seed), stream]).generate_state(1)[0])


def _init_module(module: nn.Module, seed: int) -> None:
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases, from a private generator."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in module.named_parameters():
            if name.endswith("bias"):
                p.zero_()
                continue
            fan_in = p[0].numel()
            bound = 1.0 / np.sqrt(fan_in)
            p.copy_((torch.rand(p.shape, generator=gen, dtype=torch.float64) * 2 - 1) * bound)


class PoseNet(nn.Module):
    """Backbone + head. ``backbone_calls`` counts backbone invocations."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.backbone = Backbone(cfg)
        self.head = SimCCHead(cfg)
        self.backbone_calls = 0

    def backbone_stages(self, image: torch.Tensor) -> list[torch.Tensor]:
        s = self.cfg.simcc
        if image.dim() != 4 or tuple(image.shape[1:]) != (1, s.input_height, s.input_width):
            raise ContractError(
                f"expected image batch (N, 1, {s.input_height}, {s.input_width}), got {tuple(image.shape)}"
            )
        self.backbone_calls += 1
        return self.backbone(image)

    def backbone_forward(self, image: torch.Tensor) -> torch.Tensor:
        return self.backbone_stages(image)[-1]

    def head_forward(self, feat: torch.Tensor) -> PoseLogits:
        h, w = self.cfg.feature_hw
        if feat.dim() != 4 or tuple(feat.shape[1:]) != (self.cfg.feature_dim, h, w):
            raise ContractError(
                f"head expects features (N, {self.cfg.feature_dim}, {h}, {w}), got {tuple(feat.shape)}"
            )
        return self.head(feat)

    def forward(self, image: torch.Tensor) -> PoseLogits:
        return self.head_forward(self.backbone_forward(image))


def init_model(cfg: ModelConfig, seed: int | None = None) -> PoseNet:
    """Deterministic model init; backbone and head draw from separate streams."""
    seed = cfg.init_seed if seed is None else seed
    model = PoseNet(cfg)
    _init_module(model.backbone, _derived_seed(seed, 0))
    _init_module(model.head, _derived_seed(seed, 1))
    return model


def reinit_head(model: PoseNet, seed: int) -> PoseNet:
    _init_module(model.head, _derived_seed(seed, 1))
    return model


class FeatureProjection(nn.Module):
    """Learnable 1x1 conv mapping student feature channels onto teacher channels."""

    def __init__(self, student_dim: int, teacher_dim: int, seed: int = 0):
        super().__init__()
        self.conv = nn.Conv2d(student_dim, teacher_dim, 1)
        if student_dim == teacher_dim:
            with torch.no_grad():
                self.conv.weight.copy_(torch.eye(student_dim).view(student_dim, student_dim, 1, 1))
                self.conv.bias.zero_()
        else:
            _init_module(self, _derived_seed(seed, 2))

    def forward(self, feat: torch.Tensor) -> torch.Tensor:
        if feat.dim() != 4 or feat.shape[1] != self.conv.in_channels:
            raise ContractError(
                f"projection expects {self.conv.in_channels} input channels, got {tuple(feat.shape)}"
            )
        return self.conv(feat)


def project_features(proj: FeatureProjection, feat_s: torch.Tensor, teacher_hw: Sequence[int] | None = None) -> torch.Tensor:
    if teacher_hw is not None and tuple(feat_s.shape[-2:]) != tuple(teacher_hw):
        raise ContractError(
            f"student feature size {tuple(feat_s.shape[-2:])} != teacher size {tuple(teacher_hw)}"
        )
    return proj(feat_s)


def partition(model: PoseNet) -> dict[str, list[str]]:
    """Parameter names owned by each partition."""
    names = [n for n, _ in model.named_parameters()]
    return {
        "backbone": [n for n in names if n.startswith("backbone.")],
        "head": [n for n in names if n.startswith("head.")],
    }


def tensor_digest(module: nn.Module) -> str:
    """sha256 over every parameter's raw bytes, in name order."""
    h = hashlib.sha256()
    for name, p in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def save_checkpoint(model: PoseNet, path: str | Path, extra: dict | None = None) -> Path:
    """Write the model as a header line of JSON followed by raw <f8 tensors.

    Layout: magic line, one line of compact JSON (config, tensor manifest
    with name/shape/offset in bytes into the payload, extra metadata), then
    the payload of little-endian float64 values in manifest order.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors = []
    chunks = []
    offset = 0
    for name, t in model.state_dict().items():
        arr = t.detach().cpu().numpy().astype("<f8")
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    header = {
        "config": model.cfg.to_dict(),
        "tensors": tensors,
        "payload_bytes": offset,
        "extra": extra or {},
    }
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(json.dumps(header, sort_keys=True, separators=(",", ":")).encode() + b"\n")
        for c in chunks:
            f.write(c)
    return path


def load_checkpoint(path: str | Path, dtype: torch.dtype = torch.float32) -> tuple[PoseNet, dict]:
    path = Path(path)
    with open(path, "rb") as f:
        magic = f.readline()
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a posedistill checkpoint")
        header = json.loads(f.readline())
        payload = f.read()
    if len(payload) != header["payload_bytes"]:
        raise ValueError(f"{path}: truncated payload")
    model = PoseNet(ModelConfig.from_dict(header["config"]))
    state = {}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=entry["offset"])
        state[entry["name"]] = torch.from_numpy(arr.reshape(entry["shape"]).copy())
    model.load_state_dict(state)
    return model.to(dtype), header

