"""Experiment specs and the arms x seeds ablation runner.

A spec is a YAML document::

    name: table6
    seeds: [0, 1, 2]
    dataset:
      gen: {num_samples: 2500, seed: 0}     # or  path: some/dir
    teacher:
      model: {backbone_channels: [16, 32], feature_dim: 32, head_hidden: 128}
      train: {epochs: 50, optimizer: adam, learning_rate: 0.003, seed: 100}
    student:
      model: {backbone_channels: [8, 16], feature_dim: 16, head_hidden: 64}
    train: {epochs: 50, optimizer: adam, learning_rate: 0.003}
    arms:
      - {name: gt, kind: stage1, distill: {use_fea: false, use_logit: false, use_decay: false}}
      - {name: gt_s2, kind: stage2, base: gt}

Arm kinds: ``scratch`` (label-only), ``stage1`` (first-stage distillation
with the arm's distill flags) and ``stage2`` (head self-distillation on the
model produced by arm ``base`` for the same seed, or on ``checkpoint``).
"""
from __future__ import annotations

import copy
import dataclasses
import json
import logging
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .codec import SimCCConfig
from .losses import DistillConfig
from .metrics import GROUPS, compare_runs, format_table, table_csv
from .model import ModelConfig, load_checkpoint, save_checkpoint
from .synth import GenConfig, PoseDataset, generate_dataset
from .trainers import RunRecord, TrainConfig, TrainingDiverged, distill_stage1, distill_stage2, train_scratch

logger = logging.getLogger(__name__)

ARM_KINDS = ("scratch", "stage1", "stage2")


class ConfigError(ValueError):
    """Invalid experiment spec; the message names the offending field."""


@dataclass
class Arm:
    name: str
    kind: str = "stage1"
    distill: dict = field(default_factory=dict)
    base: str | None = None
    checkpoint: str | None = None


@dataclass
class ExperimentSpec:
    name: str
    seeds: list[int]
    gen: GenConfig | None
    dataset_path: str | None
    teacher_model: ModelConfig | None
    teacher_train: TrainConfig | None
    teacher_checkpoint: str | None
    student_model: ModelConfig
    train: dict
    arms: list[Arm]
    raw: dict = field(default_factory=dict)
    base_dir: Path = field(default_factory=Path)

    def train_config(self, seed: int, distill: dict | None = None) -> TrainConfig:
        d = {**self.train.get("distill", {}), **(distill or {})}
        return TrainConfig(**{**self.train, "seed": seed, "distill": DistillConfig(**d)})

    def resolve(self, p: str) -> Path:
        path = Path(p)
        return path if path.is_absolute() else self.base_dir / path


def _build(cls, data: Any, where: str):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(data).__name__}")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown field(s) {', '.join(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from e


def _model_cfg(data: dict | None, simcc: SimCCConfig, num_keypoints: int | None, where: str) -> ModelConfig:
    data = dict(data or {})
    data.setdefault("simcc", dataclasses.asdict(simcc))
    if num_keypoints is not None:
        data.setdefault("num_keypoints", num_keypoints)
    if isinstance(data["simcc"], dict):
        data["simcc"] = _build(SimCCConfig, data["simcc"], f"{where}.simcc")
    return _build(ModelConfig, data, where)


def parse_spec(text: str, base_dir: Path | str = ".") -> ExperimentSpec:
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        loc = f"line {mark.line + 1}" if mark else "?"
        raise ConfigError(f"{loc}: {e}") from e
    if not isinstance(raw, dict):
        raise ConfigError("top level: expected a mapping")
    for key in ("name", "seeds"):
        if key not in raw:
            raise ConfigError(f"missing required field '{key}'")
    seeds = raw["seeds"]
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) for s in seeds):
        raise ConfigError("seeds: expected a non-empty list of integers")

    ds = raw.get("dataset") or {}
    gen = None
    if "gen" in ds:
        if not isinstance(ds["gen"], dict) or "seed" not in ds["gen"]:
            raise ConfigError("missing required field 'dataset.gen.seed'")
        gen = _build(GenConfig, ds["gen"], "dataset.gen")
    if gen is None and "path" not in ds:
        raise ConfigError("dataset: need 'gen' or 'path'")
    num_kpts = gen.num_keypoints if gen else None
    simcc = _build(SimCCConfig, raw.get("simcc", {"input_width": gen.image_size if gen else 64,
                                                 "input_height": gen.image_size if gen else 64}), "simcc")

    teacher = raw.get("teacher") or {}
    t_model = _model_cfg(teacher.get("model"), simcc, num_kpts, "teacher.model") if teacher else None
    t_train = None
    if teacher.get("train") is not None:
        t_train = _build(TrainConfig, {"seed": 0, **teacher["train"]}, "teacher.train")
    student = raw.get("student") or {}
    s_model = _model_cfg(student.get("model"), simcc, num_kpts, "student.model")

    train = raw.get("train") or {}
    if not isinstance(train, dict):
        raise ConfigError("train: expected a mapping")
    _build(TrainConfig, {**train, "seed": 0}, "train")

    arms_raw = raw.get("arms")
    if not isinstance(arms_raw, list) or not arms_raw:
        raise ConfigError("arms: expected a non-empty list")
    arms = []
    for i, a in enumerate(arms_raw):
        arm = _build(Arm, a, f"arms[{i}]")
        if arm.kind not in ARM_KINDS:
            raise ConfigError(f"arms[{i}].kind: expected one of {ARM_KINDS}, got {arm.kind!r}")
        _build(DistillConfig, {**train.get("distill", {}), **arm.distill}, f"arms[{i}].distill")
        arms.append(arm)
    names = [a.name for a in arms]
    dup = sorted({n for n in names if names.count(n) > 1})
    if dup:
        raise ConfigError(f"arms: duplicate arm name(s) {', '.join(dup)}")
    for i, arm in enumerate(arms):
        if arm.kind == "stage2":
            if arm.base is None and arm.checkpoint is None:
                raise ConfigError(f"arms[{i}]: stage2 arm needs 'base' or 'checkpoint'")
            if arm.base is not None and arm.base not in names[:i]:
                raise ConfigError(f"arms[{i}].base: unknown or later arm {arm.base!r}")
        needs_teacher = arm.kind == "stage1" and DistillConfig(
            **{**train.get("distill", {}), **arm.distill}).distills
        if needs_teacher and not teacher:
            raise ConfigError(f"arms[{i}]: distillation arm needs a 'teacher' section")

    return ExperimentSpec(
        name=str(raw["name"]), seeds=seeds, gen=gen, dataset_path=ds.get("path"),
        teacher_model=t_model, teacher_train=t_train, teacher_checkpoint=teacher.get("checkpoint"),
        student_model=s_model, train=train, arms=arms, raw=raw, base_dir=Path(base_dir),
    )


def load_spec(path: str | Path) -> ExperimentSpec:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read {path}: {e}") from e
    return parse_spec(text, path.parent)


def dataset_dir(spec: ExperimentSpec, out: Path) -> Path:
    return spec.resolve(spec.dataset_path) if spec.dataset_path else out / "data"


def ensure_dataset(spec: ExperimentSpec, out: Path) -> Path:
    root = dataset_dir(spec, out)
    if not (root / "manifest.json").exists():
        if spec.gen is None:
            raise ConfigError(f"dataset.path: no dataset at {root}")
        generate_dataset(spec.gen, root)
    return root


def load_splits(spec: ExperimentSpec, root: Path) -> tuple[PoseDataset, PoseDataset]:
    simcc = spec.student_model.simcc
    return PoseDataset.from_dir(root, "train", simcc), PoseDataset.from_dir(root, "val", simcc)


def ensure_teacher(spec: ExperimentSpec, out: Path, train, val):
    if spec.teacher_checkpoint:
        model, _ = load_checkpoint(spec.resolve(spec.teacher_checkpoint))
        return model
    ckpt = out / "teacher" / "model.ckpt"
    if ckpt.exists():
        return load_checkpoint(ckpt)[0]
    if spec.teacher_model is None or spec.teacher_train is None:
        raise ConfigError("teacher: need 'checkpoint' or both 'model' and 'train'")
    model, rec = train_scratch(spec.teacher_model, spec.teacher_train, train, val, name="teacher")
    rec.save(out / "teacher" / "record.jsonl")
    save_checkpoint(model, ckpt, extra={"record": "record.jsonl"})
    return model


def run_dir(out: Path, arm: str, seed: int) -> Path:
    return out / "runs" / arm / f"seed{seed}"


@dataclass
class ArmSummary:
    """Seed-median of an arm's final metrics, shaped like a record for ranking."""

    name: str
    eval_split: str
    final: dict
    seeds: int


def summarize_arms(records: list[RunRecord], arm_order: list[str]) -> list[ArmSummary]:
    out = []
    for arm in arm_order:
        recs = [r for r in records if r.name == arm and r.status == "ok"]
        if not recs:
            continue
        pck = {
            tau: {g: statistics.median(r.final["pck"][tau][g] for r in recs) for g in GROUPS}
            for tau in recs[0].final["pck"]
        }
        ap = {g: statistics.median(r.final["ap"][g] for r in recs) for g in GROUPS}
        out.append(ArmSummary(arm, recs[0].eval_split, {"pck": pck, "ap": ap}, len(recs)))
    return out


def run_ablation(spec: ExperimentSpec, out: Path) -> dict:
    """Run every (arm, seed) not already on disk, then write tables and plots.

    Returns {"records": [...], "failed": [(arm, seed, message)], "summary": [...]}.
    """
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "spec.json").write_text(json.dumps(spec.raw, sort_keys=True, indent=1) + "\n")
    root = ensure_dataset(spec, out)
    train, val = load_splits(spec, root)
    teacher = None
    if any(a.kind == "stage1" and spec.train_config(0, a.distill).distill.distills for a in spec.arms):
        teacher = ensure_teacher(spec, out, train, val)

    records, failed = [], []
    for seed in spec.seeds:
        for arm in spec.arms:
            rd = run_dir(out, arm.name, seed)
            rec_path = rd / "record.jsonl"
            if rec_path.exists():
                rec = RunRecord.load(rec_path)
                records.append(rec)
                if rec.status != "ok":
                    failed.append((arm.name, seed, "previously failed"))
                continue
            try:
                model, rec = _run_arm(spec, arm, seed, out, train, val, teacher)
            except (TrainingDiverged, FileNotFoundError) as e:
                logger.error("arm %s seed %d failed: %s", arm.name, seed, e)
                rec = getattr(e, "record", None) or RunRecord(arm.name, arm.kind, seed, {}, status="failed")
                rec.status = "diverged" if isinstance(e, TrainingDiverged) else "failed"
                rec.save(rec_path)
                records.append(rec)
                failed.append((arm.name, seed, str(e)))
                continue
            save_checkpoint(model, rd / "model.ckpt", extra={"arm": arm.name, "seed": seed})
            rec.save(rec_path)
            records.append(rec)
            logger.info("%s seed %d: whole PCK@0.1 %.4f", arm.name, seed, rec.final["pck"]["0.1"]["whole"])
    summary = write_reports(out, records, [a.name for a in spec.arms])
    return {"records": records, "failed": failed, "summary": summary}


def _run_arm(spec, arm: Arm, seed: int, out: Path, train, val, teacher):
    cfg = spec.train_config(seed, arm.distill)
    if arm.kind == "scratch":
        return train_scratch(spec.student_model, cfg, train, val, name=arm.name)
    if arm.kind == "stage1":
        return distill_stage1(teacher if cfg.distill.distills else None, spec.student_model, cfg, train, val,
                              name=arm.name)
    if arm.checkpoint:
        base_path = spec.resolve(arm.checkpoint)
    else:
        base_path = run_dir(out, arm.base, seed) / "model.ckpt"
    if not base_path.exists():
        raise FileNotFoundError(f"stage2 base checkpoint missing: {base_path}")
    base, _ = load_checkpoint(base_path)
    return distill_stage2(base, cfg, train, val, name=arm.name)


def write_reports(out: Path, records: list[RunRecord], arm_order: list[str]) -> list[dict]:
    ok = [r for r in records if r.status == "ok"]
    summary = summarize_arms(ok, arm_order)
    rows = compare_runs(summary) if summary else []
    (out / "ranking.txt").write_text(format_table(rows))
    (out / "ranking.csv").write_text(table_csv(rows))
    per_run = compare_runs([_named(r) for r in ok]) if ok else []
    (out / "runs.csv").write_text(table_csv(per_run))
    try:
        from .plots import plot_all

        plot_all(out, ok, summary)
    except ImportError:  # pragma: no cover - matplotlib missing
        logger.warning("matplotlib unavailable; skipping plots")
    return rows


def _named(rec: RunRecord):
    r = copy.copy(rec)
    r.name = f"{rec.name}/seed{rec.seed}"
    return r


def load_records(out: Path) -> list[RunRecord]:
    return [RunRecord.load(p) for p in sorted((Path(out) / "runs").glob("*/seed*/record.jsonl"))]
