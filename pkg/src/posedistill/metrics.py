"""PCK and simplified OKS-AP, broken down by part group."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .codec import PART_GROUPS, KeypointSet

GROUPS = (*PART_GROUPS, "whole")
PCK_TAUS = (0.05, 0.1, 0.2)
OKS_THRESHOLDS = tuple(0.5 + 0.05 * i for i in range(10))
DEFAULT_SIGMAS = {"body": 0.10, "foot": 0.07, "face": 0.03, "hand": 0.03}


class MetricContractError(ValueError):
    pass


def bbox_diagonal(kps: KeypointSet) -> float:
    """Diagonal of the box around the labeled (v > 0) keypoints."""
    pts = kps.coords[kps.visibility > 0]
    if len(pts) == 0:
        return 0.0
    w, h = pts.max(axis=0) - pts.min(axis=0)
    return float(np.hypot(w, h))


def _check_aligned(preds, gts) -> list[np.ndarray]:
    if len(preds) != len(gts):
        raise MetricContractError(f"{len(preds)} predictions for {len(gts)} ground truths")
    out = []
    for i, (p, g) in enumerate(zip(preds, gts)):
        p = np.asarray(p, dtype=np.float64).reshape(-1, 2)
        if p.shape != g.coords.shape:
            raise MetricContractError(f"sample {i}: prediction shape {p.shape} vs {g.coords.shape}")
        out.append(p)
    return out


def _group_mask(kps: KeypointSet, group: str) -> np.ndarray:
    labeled = kps.visibility > 0
    if group == "whole":
        return labeled
    return labeled & (np.asarray(kps.part_group) == group)


def pck(preds: Sequence, gts: Sequence[KeypointSet], tau: float) -> dict[str, float]:
    """Fraction of labeled keypoints with error <= tau * bbox diagonal."""
    preds = _check_aligned(preds, gts)
    hits = {g: 0 for g in GROUPS}
    counts = {g: 0 for g in GROUPS}
    for p, gt in zip(preds, gts):
        diag = bbox_diagonal(gt)
        err = np.linalg.norm(p - gt.coords, axis=1)
        ok = err <= tau * diag
        for g in GROUPS:
            m = _group_mask(gt, g)
            counts[g] += int(m.sum())
            hits[g] += int((ok & m).sum())
    return {g: hits[g] / counts[g] if counts[g] else 0.0 for g in GROUPS}


def oks(pred: np.ndarray, gt: KeypointSet, sigmas: dict[str, float], group: str) -> float | None:
    """Mean of exp(-d^2 / (2 (sigma * diag)^2)) over labeled keypoints in ``group``."""
    m = _group_mask(gt, group)
    if not m.any():
        return None
    diag = bbox_diagonal(gt)
    sig = np.array([sigmas[g] for g in gt.part_group])[m] * diag
    d2 = np.sum((pred[m] - gt.coords[m]) ** 2, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        e = np.where(sig > 0, np.exp(-d2 / (2.0 * sig**2)), (d2 == 0).astype(np.float64))
    e = np.nan_to_num(e, nan=0.0)
    return float(e.mean())


def oks_ap(preds: Sequence, gts: Sequence[KeypointSet], sigmas: dict[str, float] | None = None) -> dict[str, float]:
    """Per-group mean over OKS thresholds 0.50:0.05:0.95 of the fraction of instances passing."""
    sigmas = sigmas or DEFAULT_SIGMAS
    preds = _check_aligned(preds, gts)
    out = {}
    for g in GROUPS:
        scores = [s for s in (oks(p, gt, sigmas, g) for p, gt in zip(preds, gts)) if s is not None]
        if not scores:
            out[g] = 0.0
            continue
        scores = np.asarray(scores)
        out[g] = float(np.mean([(scores >= t).mean() for t in OKS_THRESHOLDS]))
    return out


@dataclass
class EvalReport:
    pck: dict[str, dict[str, float]]
    ap: dict[str, float]
    num_samples: int
    config: dict = field(default_factory=dict)

    def whole_pck(self, tau: float = 0.1) -> float:
        return self.pck[_tau_key(tau)]["whole"]

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(**d)


def _tau_key(tau: float) -> str:
    return f"{tau:g}"


def evaluate(preds, gts, taus=PCK_TAUS, sigmas=None, config: dict | None = None) -> EvalReport:
    return EvalReport(
        pck={_tau_key(t): pck(preds, gts, t) for t in taus},
        ap=oks_ap(preds, gts, sigmas),
        num_samples=len(gts),
        config=dict(config or {}),
    )


def compare_runs(records: Sequence, tau: float = 0.1) -> list[dict]:
    """Rank runs by whole-body PCK@tau, with deltas against the first record.

    Each record needs ``name``, ``eval_split`` and ``final`` (an EvalReport
    or its dict form). Ties are broken by name.
    """
    if not records:
        return []
    splits = {r.eval_split for r in records}
    if len(splits) > 1:
        raise MetricContractError(f"records evaluated on different splits: {sorted(splits)}")

    def whole(r):
        final = r.final if isinstance(r.final, dict) else r.final.to_dict()
        return final["pck"][_tau_key(tau)]["whole"]

    base = whole(records[0])
    rows = [{"name": r.name, "pck": whole(r), "delta": whole(r) - base} for r in records]
    rows.sort(key=lambda row: (-row["pck"], row["name"]))
    for rank, row in enumerate(rows, 1):
        row["rank"] = rank
    return rows


def format_table(rows: list[dict], tau: float = 0.1) -> str:
    head = f"{'rank':>4}  {'run':<28} {f'PCK@{tau:g}':>9} {'delta':>8}"
    lines = [head, "-" * len(head)]
    for r in rows:
        lines.append(f"{r['rank']:>4}  {r['name']:<28} {r['pck']:>9.4f} {r['delta']:>+8.4f}")
    return "\n".join(lines) + "\n"


def table_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=["rank", "name", "pck", "delta"], lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: r[k] for k in ("rank", "name", "pck", "delta")})
    return buf.getvalue()
