"""Command-line entry point.

Exit codes: 0 success, 1 experiment-level failure, 2 config error,
3 refusal to overwrite existing output.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
from pathlib import Path

from . import gradcheck
from .codec import PoseLogits, decode
from .experiment import (
    ConfigError,
    dataset_dir,
    ensure_dataset,
    load_records,
    load_spec,
    load_splits,
    run_ablation,
    write_reports,
)
from .metrics import evaluate
from .model import load_checkpoint, save_checkpoint
from .synth import DatasetError, PoseDataset, generate_dataset, read_manifest
from .trainers import TrainingDiverged, distill_stage1, distill_stage2, evaluate_model, train_scratch

OUT_ENV = "POSEDISTILL_OUT"
EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_REFUSE = 0, 1, 2, 3

class Refused(RuntimeError):
    pass


def _out_root() -> Path:
    return Path(os.environ.get(OUT_ENV, "runs"))


def _default_out(args, spec, leaf: str) -> Path:
    return Path(args.out) if args.out else _out_root() / spec.name / leaf


def _guard(path: Path, force: bool) -> None:
    occupied = any(path.iterdir()) if path.is_dir() else path.exists()
    if occupied:
        if not force:
            raise Refused(f"{path} exists; pass --force to overwrite")
        if path.is_dir():
            shutil.rmtree(path)
        else:
            path.unlink()


def cmd_gen(args) -> int:
    spec = load_spec(args.config)
    if spec.gen is None:
        raise ConfigError("dataset.gen: required for gen")
    root = Path(args.out) if args.out else (
        spec.resolve(spec.dataset_path) if spec.dataset_path else _out_root() / spec.name / "data")
    _guard(root, args.force)
    manifest_path, manifest = generate_dataset(spec.gen, root)
    counts = {k: len(v) for k, v in manifest["splits"].items()}
    print(f"manifest: {manifest_path}")
    print(f"samples: {manifest['num_samples']}  keypoints: {manifest['num_keypoints']}  splits: {counts}")
    return EXIT_OK


def _finish(model, rec, out: Path) -> int:
    save_checkpoint(model, out / "model.ckpt", extra={"name": rec.name, "seed": rec.seed})
    rec.save(out / "record.jsonl")
    print(f"{rec.name} seed {rec.seed}: whole PCK@0.1 {rec.final['pck']['0.1']['whole']:.4f} -> {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    spec = load_spec(args.config)
    seed = args.seed if args.seed is not None else spec.seeds[0]
    out = _default_out(args, spec, f"train_{args.role}_seed{seed}")
    _guard(out, args.force)
    train, val = load_splits(spec, Path(args.data) if args.data else ensure_dataset(spec, out))
    if args.role == "teacher":
        if spec.teacher_model is None or spec.teacher_train is None:
            raise ConfigError("teacher: 'model' and 'train' required for --role teacher")
        cfg = spec.teacher_train
        if args.seed is not None:
            cfg.seed = args.seed
        model, rec = train_scratch(spec.teacher_model, cfg, train, val, name="teacher")
    else:
        model, rec = train_scratch(spec.student_model, spec.train_config(seed), train, val, name="scratch")
    return _finish(model, rec, out)


def _arm_distill(spec, arm_name):
    if arm_name is None:
        return {}
    for a in spec.arms:
        if a.name == arm_name:
            return a.distill
    raise ConfigError(f"--arm: no arm named {arm_name!r}")


def cmd_distill_s1(args) -> int:
    spec = load_spec(args.config)
    seed = args.seed if args.seed is not None else spec.seeds[0]
    out = _default_out(args, spec, f"s1_{args.arm or 'default'}_seed{seed}")
    _guard(out, args.force)
    train, val = load_splits(spec, Path(args.data) if args.data else ensure_dataset(spec, out))
    teacher, _ = load_checkpoint(args.checkpoint)
    cfg = spec.train_config(seed, _arm_distill(spec, args.arm))
    model, rec = distill_stage1(teacher, spec.student_model, cfg, train, val, name=args.arm or "stage1")
    return _finish(model, rec, out)


def cmd_distill_s2(args) -> int:
    spec = load_spec(args.config)
    seed = args.seed if args.seed is not None else spec.seeds[0]
    out = _default_out(args, spec, f"s2_seed{seed}")
    _guard(out, args.force)
    train, val = load_splits(spec, Path(args.data) if args.data else ensure_dataset(spec, out))
    trained, _ = load_checkpoint(args.checkpoint)
    model, rec = distill_stage2(trained, spec.train_config(seed), train, val, name="stage2")
    return _finish(model, rec, out)


def cmd_ablate(args) -> int:
    spec = load_spec(args.config)
    if args.seed is not None:
        spec.seeds = [args.seed]
    out = _default_out(args, spec, "ablate")
    result = run_ablation(spec, out)
    print((out / "ranking.txt").read_text(), end="")
    for arm, seed, msg in result["failed"]:
        print(f"FAILED {arm} seed {seed}: {msg}")
    print(f"records: {len(result['records'])} -> {out}")
    return EXIT_FAIL if result["failed"] else EXIT_OK


def cmd_eval(args) -> int:
    if args.data:
        root = Path(args.data)
    elif args.config:
        spec = load_spec(args.config)
        root = dataset_dir(spec, _out_root() / spec.name)
    else:
        raise ConfigError("eval: need --data or --config")
    manifest = read_manifest(root)
    model, header = load_checkpoint(args.checkpoint) if args.checkpoint else (None, None)
    if model is not None:
        if model.cfg.num_keypoints != manifest["num_keypoints"]:
            raise ConfigError(
                f"checkpoint has {model.cfg.num_keypoints} keypoints, dataset has {manifest['num_keypoints']}")
        if model.cfg.simcc.input_width != manifest["image_size"]:
            raise ConfigError("checkpoint input size does not match dataset image_size")
        simcc = model.cfg.simcc
    elif args.oracle:
        from .codec import SimCCConfig

        simcc = SimCCConfig(input_width=manifest["image_size"], input_height=manifest["image_size"])
    else:
        raise ConfigError("eval: need --checkpoint or --oracle")
    data = PoseDataset.from_dir(root, args.split, simcc)
    if model is not None:
        report = evaluate_model(model, data)
    else:
        coords, _ = decode(PoseLogits(data.targets.x_labels, data.targets.y_labels), simcc)
        report = evaluate(list(coords), data.keypoints, config={"split": data.split_tag, "predictor": "oracle"})
    text = report.to_json()
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    print(text, end="")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    try:
        results = gradcheck.run_suite(tuple(args.seeds), fault=args.inject_fault)
    except KeyError as e:
        raise ConfigError(str(e)) from e
    worst = {}
    for r in results:
        if r.op not in worst or r.rel_err > worst[r.op].rel_err:
            worst[r.op] = r
    for op, r in worst.items():
        print(f"{'ok  ' if r.ok else 'FAIL'} {op:<22} max_rel_err={r.rel_err:.3e} (seed {r.seed})")
    top = max(worst.values(), key=lambda r: r.rel_err)
    print(f"worst: {top.op} {top.rel_err:.3e}")
    failed = [r for r in worst.values() if not r.ok]
    for r in failed:
        print(f"gradient mismatch in {r.op}: relative error {r.rel_err:.3e} >= {gradcheck.TOLERANCE:g}")
    return EXIT_FAIL if failed else EXIT_OK


def cmd_report(args) -> int:
    out = Path(args.out) if args.out else None
    if out is None:
        raise ConfigError("report: --out is required")
    records = load_records(out)
    if not records:
        print(f"no run records under {out}", file=sys.stderr)
        return EXIT_FAIL
    order = []
    spec_path = out / "spec.json"
    if spec_path.exists():
        order = [a["name"] for a in json.loads(spec_path.read_text()).get("arms", [])]
    order += [r.name for r in records if r.name not in order]
    write_reports(out, records, order)
    print((out / "ranking.txt").read_text(), end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="posedistill", description="Two-stage pose distillation experiments")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True, checkpoint=False):
        if config:
            sp.add_argument("--config", required=True, help="experiment spec (YAML)")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", default=None, help=f"output path (default under ${OUT_ENV})")
        sp.add_argument("--force", action="store_true", help="overwrite existing output")
        if checkpoint:
            sp.add_argument("--checkpoint", required=True)
        sp.add_argument("--data", default=None, help="existing dataset directory")

    sp = sub.add_parser("gen", help="generate the synthetic dataset")
    common(sp)
    sp.set_defaults(fn=cmd_gen)
    sp = sub.add_parser("train", help="train a model from labels only")
    common(sp)
    sp.add_argument("--role", choices=("teacher", "student"), default="teacher")
    sp.set_defaults(fn=cmd_train)
    sp = sub.add_parser("distill-s1", help="first-stage distillation from a teacher checkpoint")
    common(sp, checkpoint=True)
    sp.add_argument("--arm", default=None, help="take distill flags from this arm of the spec")
    sp.set_defaults(fn=cmd_distill_s1)
    sp = sub.add_parser("distill-s2", help="second-stage head self-distillation of a checkpoint")
    common(sp, checkpoint=True)
    sp.set_defaults(fn=cmd_distill_s2)
    sp = sub.add_parser("ablate", help="run every arm x seed of a spec and rank arms")
    common(sp)
    sp.set_defaults(fn=cmd_ablate)
    sp = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    sp.add_argument("--config", default=None)
    sp.add_argument("--checkpoint", default=None)
    sp.add_argument("--data", default=None)
    sp.add_argument("--split", default="val")
    sp.add_argument("--out", default=None)
    sp.add_argument("--oracle", action="store_true", help="score decoded ground-truth targets instead of a model")
    sp.set_defaults(fn=cmd_eval)
    sp = sub.add_parser("gradcheck", help="finite-difference check of every loss and forward op")
    sp.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    sp.add_argument("--inject-fault", default=None, metavar="OP", help="scale OP's analytic gradient by 1.01")
    sp.set_defaults(fn=cmd_gradcheck)
    sp = sub.add_parser("report", help="rebuild ranking tables and plots from run records")
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except Refused as e:
        print(f"refusing: {e}", file=sys.stderr)
        return EXIT_REFUSE
    except (DatasetError, TrainingDiverged) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
