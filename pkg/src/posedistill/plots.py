"""Static PNG plots for ablation outputs."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .metrics import GROUPS  # noqa: E402


def plot_all(out: Path, records, summary) -> list[Path]:
    out = Path(out) / "plots"
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for key in sorted({k for r in records for e in r.epochs for k in e["losses"]}):
        fig, ax = plt.subplots(figsize=(6, 4))
        for r in records:
            curve = [e["losses"].get(key) for e in r.epochs]
            if any(v is not None for v in curve):
                ax.plot([e["epoch"] for e in r.epochs], curve, label=f"{r.name}/s{r.seed}", lw=1)
        ax.set_xlabel("epoch")
        ax.set_ylabel(f"loss[{key}]")
        ax.legend(fontsize=6)
        paths.append(_save(fig, out / f"loss_{key}.png"))

    fig, ax = plt.subplots(figsize=(6, 4))
    seen = set()
    for r in records:
        if r.name in seen:
            continue
        seen.add(r.name)
        ax.plot([e["epoch"] for e in r.epochs], [e["r"] for e in r.epochs], label=r.name)
    ax.set_xlabel("epoch")
    ax.set_ylabel("r(t)")
    ax.legend(fontsize=6)
    paths.append(_save(fig, out / "decay.png"))

    if summary:
        fig, ax = plt.subplots(figsize=(7, 4))
        width = 0.8 / len(summary)
        for i, s in enumerate(summary):
            vals = [s.final["pck"]["0.1"][g] for g in GROUPS]
            ax.bar([j + i * width for j in range(len(GROUPS))], vals, width, label=s.name)
        ax.set_xticks([j + 0.4 - width / 2 for j in range(len(GROUPS))], GROUPS)
        ax.set_ylabel("median PCK@0.1")
        ax.legend(fontsize=6)
        paths.append(_save(fig, out / "pck_groups.png"))
    return paths


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, dpi=90, metadata={"Software": None})
    plt.close(fig)
    return path
