"""Scratch training, first-stage distillation and second-stage head self-distillation.

All three share one minibatch loop. Batch order, model init and the
projection init are drawn from seeded private generators so a run is a
pure function of its configs, its seed and the data.
"""
from __future__ import annotations

import copy
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import losses
from .codec import SimCCTarget, decode
from .losses import DistillConfig
from .metrics import evaluate
from .model import (
    ContractError,
    FeatureProjection,
    ModelConfig,
    PoseNet,
    _derived_seed,
    init_model,
    project_features,
    reinit_head,
)
from .synth import PoseDataset

logger = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, record: "RunRecord"):
        super().__init__(message)
        self.record = record


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    learning_rate: float = 0.01
    lr_schedule: str = "cosine"
    optimizer: str = "sgd"
    seed: int = 0
    stage2_fraction: float = 0.2
    # stage 2 restarts its own schedule; None reuses learning_rate
    stage2_learning_rate: float | None = None
    stage2_batch_size: int | None = None
    eval_every: int | None = None
    distill: DistillConfig = field(default_factory=DistillConfig)

    def __post_init__(self):
        if isinstance(self.distill, dict):
            self.distill = DistillConfig(**self.distill)
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1 or (self.stage2_batch_size is not None and self.stage2_batch_size < 1):
            raise ValueError("batch sizes must be >= 1")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if not 0.0 < self.stage2_fraction <= 1.0:
            raise ValueError("stage2_fraction must be in (0, 1]")

    @property
    def stage2_epochs(self) -> int:
        return max(1, round(self.stage2_fraction * self.epochs))

    def eval_cadence(self, epochs: int) -> int:
        return self.eval_every or max(1, epochs // 10)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RunRecord:
    name: str
    kind: str
    seed: int
    config: dict
    epochs: list[dict] = field(default_factory=list)
    final: dict = field(default_factory=dict)
    eval_split: str = ""
    status: str = "ok"
    wall_clock: float = 0.0

    def to_jsonl(self) -> str:
        """Header line, one line per epoch, final line. Wall-clock is left out
        so identical runs serialize to identical bytes."""
        dump = lambda d: json.dumps(d, sort_keys=True, separators=(",", ":"))  # noqa: E731
        lines = [dump({"type": "header", "name": self.name, "kind": self.kind, "seed": self.seed,
                       "config": self.config, "eval_split": self.eval_split})]
        lines += [dump({"type": "epoch", **e}) for e in self.epochs]
        lines.append(dump({"type": "final", "status": self.status, "metrics": self.final}))
        return "\n".join(lines) + "\n"

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_jsonl())
        path.with_name(path.stem + ".timing.json").write_text(json.dumps({"wall_clock": self.wall_clock}) + "\n")
        return path

    @classmethod
    def load(cls, path: str | Path) -> "RunRecord":
        lines = [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
        head, *epochs, tail = lines
        rec = cls(name=head["name"], kind=head["kind"], seed=head["seed"], config=head["config"],
                  eval_split=head["eval_split"])
        rec.epochs = [{k: v for k, v in e.items() if k != "type"} for e in epochs]
        rec.final = tail["metrics"]
        rec.status = tail["status"]
        return rec

    def loss_curve(self, key: str) -> list[float]:
        return [e["losses"][key] for e in self.epochs]


def _lr_at(base: float, schedule: str, epoch: int, total: int) -> float:
    if schedule == "constant":
        return base
    return base * 0.5 * (1.0 + math.cos(math.pi * (epoch - 1) / total))


def _make_optimizer(params, cfg: TrainConfig, lr: float):
    if cfg.optimizer == "adam":
        return torch.optim.Adam(params, lr=lr)
    return torch.optim.SGD(params, lr=lr, momentum=0.0)


def _batches(n: int, batch_size: int, seed: int, epoch: int):
    gen = torch.Generator().manual_seed(_derived_seed(seed, 1000 + epoch))
    order = torch.randperm(n, generator=gen)
    for i in range(0, n, batch_size):
        yield order[i : i + batch_size]


def _slice_targets(t: SimCCTarget, idx) -> SimCCTarget:
    return SimCCTarget(t.x_labels[idx], t.y_labels[idx])


@torch.no_grad()
def predict(model: PoseNet, data: PoseDataset, batch_size: int = 256) -> np.ndarray:
    """Backbone -> head -> decode; returns (M, K, 2) pixel coords."""
    model.eval()
    out = []
    for i in range(0, len(data), batch_size):
        logits = model(data.images[i : i + batch_size].to(_dtype(model)))
        coords, _ = decode(logits, model.cfg.simcc)
        out.append(coords)
    return np.concatenate(out)


def evaluate_model(model: PoseNet, data: PoseDataset):
    return evaluate(list(predict(model, data)), data.keypoints, config={"split": data.split_tag})


def _dtype(model) -> torch.dtype:
    return next(model.parameters()).dtype


@torch.no_grad()
def head_kl(teacher: PoseNet, student: PoseNet, data: PoseDataset, batch_size: int = 256) -> float:
    """Mean per-row KL(teacher || student) over both axes, backbone shared."""
    total, rows = 0.0, 0
    for i in range(0, len(data), batch_size):
        feat = student.backbone_forward(data.images[i : i + batch_size].to(_dtype(student)))
        for t, s in zip(teacher.head_forward(feat), student.head_forward(feat)):
            lt = torch.log_softmax(t.double(), -1)
            ls = torch.log_softmax(s.double(), -1)
            kl = (lt.exp() * (lt - ls)).sum(-1)
            total += float(kl.sum())
            rows += kl.numel()
    return total / rows


def _summarize(report) -> dict:
    return {"pck@0.1": report.pck["0.1"], "ap": report.ap}


def _check_finite(value: float, what: str, record: RunRecord, epoch: int):
    if not math.isfinite(value):
        record.status = "diverged"
        raise TrainingDiverged(f"{record.name}: non-finite {what} at epoch {epoch}", record)


def train_scratch(model_cfg: ModelConfig, train_cfg: TrainConfig, dataset: PoseDataset,
                  val: PoseDataset | None = None, name: str = "scratch") -> tuple[PoseNet, RunRecord]:
    """Label-only training; the first-stage loop with every distillation term off."""
    cfg = copy.deepcopy(train_cfg)
    cfg.distill = DistillConfig(**{**train_cfg.distill.to_dict(), "use_gt": True, "use_fea": False,
                                   "use_logit": False})
    return _stage1(None, model_cfg, cfg, dataset, val, name, kind="scratch")


def distill_stage1(teacher: PoseNet | None, student_cfg: ModelConfig, train_cfg: TrainConfig,
                   dataset: PoseDataset, val: PoseDataset | None = None,
                   name: str = "stage1") -> tuple[PoseNet, RunRecord]:
    """Train a fresh student against labels plus a frozen teacher's features and logits.

    The returned model excludes the feature projection, which only exists
    during training.
    """
    return _stage1(teacher, student_cfg, train_cfg, dataset, val, name, kind="stage1")


def _stage1(teacher, student_cfg, cfg: TrainConfig, data, val, name, kind):
    d = cfg.distill
    if d.distills and teacher is None:
        raise ContractError("distillation terms enabled but no teacher given")
    if teacher is not None and d.distills:
        if teacher.cfg.simcc != student_cfg.simcc:
            raise ContractError("teacher and student must share the SimCC codec config")
        if d.use_fea and _tap_hw(teacher.cfg) != _tap_hw(student_cfg):
            raise ContractError(
                f"teacher feature size {_tap_hw(teacher.cfg)} != student feature size {_tap_hw(student_cfg)}"
            )
        teacher.eval()
        for p in teacher.parameters():
            p.requires_grad_(False)

    student = init_model(student_cfg, seed=cfg.seed)
    params = list(student.parameters())
    proj = None
    if d.use_fea:
        proj = FeatureProjection(_tap_channels(student_cfg), _tap_channels(teacher.cfg),
                                 seed=_derived_seed(cfg.seed, 7))
        params += list(proj.parameters())

    record = RunRecord(name=name, kind=kind, seed=cfg.seed,
                       config={"model": student_cfg.to_dict(), "train": cfg.to_dict(),
                               "teacher": teacher.cfg.to_dict() if teacher is not None and d.distills else None},
                       eval_split=val.split_tag if val is not None else "")
    start = time.perf_counter()
    opt = _make_optimizer(params, cfg, cfg.learning_rate)
    cadence = cfg.eval_cadence(cfg.epochs)
    for epoch in range(1, cfg.epochs + 1):
        lr = _lr_at(cfg.learning_rate, cfg.lr_schedule, epoch, cfg.epochs)
        for g in opt.param_groups:
            g["lr"] = lr
        r = losses.decay_weight(epoch, cfg.epochs) if d.use_decay else 1.0
        sums: dict[str, float] = {}
        steps = 0
        student.train()
        for idx in _batches(len(data), cfg.batch_size, cfg.seed, epoch):
            imgs = data.images[idx]
            s_stages = student.backbone_stages(imgs)
            s_probs = losses.to_probs(student.head_forward(s_stages[-1]), d.temperature)
            parts = {}
            if d.use_gt:
                parts["ori"] = losses.loss_original(s_probs, _slice_targets(data.targets, idx),
                                                    data.weights[idx], d.normalize_uniformly)
            if d.distills:
                with torch.no_grad():
                    t_stages = teacher.backbone_stages(imgs)
                if d.use_fea:
                    f_s = project_features(proj, s_stages[student_cfg.feature_tap],
                                           t_stages[teacher.cfg.feature_tap].shape[-2:])
                    parts["fea"] = losses.loss_feature(t_stages[teacher.cfg.feature_tap], f_s)
                if d.use_logit:
                    with torch.no_grad():
                        t_probs = losses.to_probs(teacher.head_forward(t_stages[-1]), d.temperature)
                    if d.use_mask_in_kd:
                        parts["logit"] = losses.loss_logit_kd_masked(
                            t_probs, s_probs, data.weights[idx], len(idx), d.normalize_uniformly)
                    else:
                        parts["logit"] = losses.loss_logit_kd(t_probs, s_probs, len(idx), d.normalize_uniformly)
            total = losses.loss_stage1(parts, d, epoch, cfg.epochs)
            _check_finite(float(total.detach()), "loss", record, epoch)
            opt.zero_grad(set_to_none=True)
            total.backward()
            opt.step()
            for k, v in parts.items():
                sums[k] = sums.get(k, 0.0) + float(v.detach())
            sums["total"] = sums.get("total", 0.0) + float(total.detach())
            steps += 1
        entry = {"epoch": epoch, "r": r, "lr": lr, "losses": {k: v / steps for k, v in sums.items()}}
        if val is not None and (epoch % cadence == 0 or epoch == cfg.epochs):
            entry["eval"] = _summarize(evaluate_model(student, val))
        record.epochs.append(entry)
        logger.debug("%s epoch %d %s", name, epoch, entry["losses"])
    if val is not None:
        record.final = evaluate_model(student, val).to_dict()
    record.wall_clock = time.perf_counter() - start
    return student, record


def _tap_channels(cfg: ModelConfig) -> int:
    widths = [*cfg.backbone_channels, cfg.feature_dim]
    return widths[cfg.feature_tap]


def _tap_hw(cfg: ModelConfig) -> tuple[int, int]:
    h, w = cfg.simcc.input_height, cfg.simcc.input_width
    sizes = []
    for _ in cfg.backbone_channels:
        h, w = (h + 1) // 2, (w + 1) // 2
        sizes.append((h, w))
    sizes.append((h, w))
    return sizes[cfg.feature_tap]


def distill_stage2(trained: PoseNet, train_cfg: TrainConfig, dataset: PoseDataset,
                   val: PoseDataset | None = None, name: str = "stage2") -> tuple[PoseNet, RunRecord]:
    """Retrain a fresh head against the model's own trained head on frozen features.

    Runs ``train_cfg.stage2_epochs`` epochs. The backbone is computed once
    per step and shared by both heads. Returns the original backbone with
    the new head.
    """
    cfg = train_cfg
    d = cfg.distill
    teacher = copy.deepcopy(trained)
    teacher.eval()
    for p in teacher.parameters():
        p.requires_grad_(False)
    student = copy.deepcopy(trained)
    reinit_head(student, _derived_seed(cfg.seed, 3))
    for p in student.backbone.parameters():
        p.requires_grad_(False)
    for p in student.head.parameters():
        p.requires_grad_(True)
    student.backbone_calls = 0

    epochs = cfg.stage2_epochs
    base_lr = cfg.stage2_learning_rate or cfg.learning_rate
    batch_size = cfg.stage2_batch_size or cfg.batch_size
    record = RunRecord(name=name, kind="stage2", seed=cfg.seed,
                       config={"model": trained.cfg.to_dict(), "train": cfg.to_dict(), "stage2_epochs": epochs},
                       eval_split=val.split_tag if val is not None else "")
    start = time.perf_counter()
    opt = _make_optimizer(list(student.head.parameters()), cfg, base_lr)
    cadence = cfg.eval_cadence(epochs)
    dtype = _dtype(student)
    for epoch in range(1, epochs + 1):
        lr = _lr_at(base_lr, cfg.lr_schedule, epoch, epochs)
        for g in opt.param_groups:
            g["lr"] = lr
        total_sum, steps = 0.0, 0
        student.eval()
        for idx in _batches(len(dataset), batch_size, _derived_seed(cfg.seed, 5), epoch):
            with torch.no_grad():
                feat = student.backbone_forward(dataset.images[idx].to(dtype))
                t_probs = losses.to_probs(teacher.head_forward(feat), d.temperature)
            s_probs = losses.to_probs(student.head_forward(feat), d.temperature)
            loss = losses.loss_stage2(t_probs, s_probs, d, len(idx))
            _check_finite(float(loss.detach()), "loss", record, epoch)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            total_sum += float(loss.detach())
            steps += 1
        entry = {"epoch": epoch, "r": 1.0, "lr": lr, "losses": {"logit": total_sum / steps, "total": total_sum / steps}}
        if val is not None and (epoch % cadence == 0 or epoch == epochs):
            entry["eval"] = {**_summarize(evaluate_model(student, val)), "kl": head_kl(teacher, student, val)}
        record.epochs.append(entry)
    if val is not None:
        record.final = evaluate_model(student, val).to_dict()
    record.wall_clock = time.perf_counter() - start
    for p in student.parameters():
        p.requires_grad_(True)
    return student, record
