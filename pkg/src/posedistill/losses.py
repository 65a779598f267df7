"""Distillation losses and the distillation-weight decay schedule.

All losses take tensors shaped (N, K, L) per axis and sum the x-axis and
y-axis terms. Probabilities are expected already normalized (row softmax of
head logits, see :func:`to_probs`).

The label loss and the logit-distillation loss are deliberately normalized
differently: the label loss averages over bins (1/L) and sums over the
batch, while the distillation loss averages over the batch (1/N) and sums
over bins. ``normalize_uniformly`` switches both to a 1/(N*L) mean.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import torch

from .codec import PoseLogits, SimCCTarget

LOG_FLOOR = 1e-12


class LossContractError(ValueError):
    pass


@dataclass
class DistillConfig:
    alpha: float = 0.00005
    beta: float = 0.1
    gamma: float = 1.0
    use_gt: bool = True
    use_fea: bool = True
    use_logit: bool = True
    use_decay: bool = True
    # ablation only: apply the visibility mask inside the logit loss
    use_mask_in_kd: bool = False
    temperature: float = 1.0
    normalize_uniformly: bool = False

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")

    @property
    def distills(self) -> bool:
        return self.use_fea or self.use_logit

    def to_dict(self) -> dict:
        return asdict(self)


def to_probs(logits: PoseLogits, temperature: float = 1.0) -> PoseLogits:
    return PoseLogits(
        torch.softmax(logits.x / temperature, dim=-1),
        torch.softmax(logits.y / temperature, dim=-1),
    )


def _xlogy(p: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
    """p * log(q) with 0 * log(anything) = 0 and log floored at LOG_FLOOR."""
    logq = torch.log(torch.clamp(q, min=LOG_FLOOR))
    return torch.where(p > 0, p * logq, torch.zeros_like(logq))


def _check_same(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise LossContractError(f"{what}: shape {tuple(a.shape)} vs {tuple(b.shape)}")


def loss_feature(feat_t: torch.Tensor, feat_s_proj: torch.Tensor) -> torch.Tensor:
    """Mean squared error over C*H*W; a leading batch dim is averaged too."""
    _check_same(feat_t, feat_s_proj, "loss_feature")
    return torch.mean((feat_t - feat_s_proj) ** 2)


def loss_original(
    probs: PoseLogits,
    target: SimCCTarget,
    weights: torch.Tensor,
    normalize_uniformly: bool = False,
) -> torch.Tensor:
    """Masked label cross-entropy: -sum_n sum_k W * sum_i (1/L) V_i log S_i."""
    total = 0.0
    for s, v in ((probs.x, target.x_labels), (probs.y, target.y_labels)):
        v = torch.as_tensor(v, dtype=s.dtype)
        _check_same(s, v, "loss_original")
        per_kpt = _xlogy(v, s).sum(-1) / s.shape[-1]
        w = torch.as_tensor(weights, dtype=s.dtype)
        if w.shape != per_kpt.shape:
            raise LossContractError(f"weights {tuple(w.shape)} vs keypoints {tuple(per_kpt.shape)}")
        term = -(w * per_kpt).sum()
        if normalize_uniformly:
            term = term / s.shape[0]
        total = total + term
    return total


def loss_logit_kd(
    t_probs: PoseLogits,
    s_probs: PoseLogits,
    batch_size: int | None = None,
    normalize_uniformly: bool = False,
) -> torch.Tensor:
    """Unmasked distillation cross-entropy: -(1/N) sum_n sum_k sum_i T_i log S_i."""
    return _kd(t_probs, s_probs, None, batch_size, normalize_uniformly)


def loss_logit_kd_masked(
    t_probs: PoseLogits,
    s_probs: PoseLogits,
    weights: torch.Tensor,
    batch_size: int | None = None,
    normalize_uniformly: bool = False,
) -> torch.Tensor:
    """Same as :func:`loss_logit_kd` with each (n, k) term scaled by W[n, k]."""
    return _kd(t_probs, s_probs, weights, batch_size, normalize_uniformly)


def _kd(t_probs, s_probs, weights, batch_size, normalize_uniformly):
    total = 0.0
    for t, s in ((t_probs.x, s_probs.x), (t_probs.y, s_probs.y)):
        _check_same(t, s, "loss_logit_kd")
        n = t.shape[0] if batch_size is None else batch_size
        per_kpt = _xlogy(t, s).sum(-1)
        if weights is not None:
            w = torch.as_tensor(weights, dtype=s.dtype)
            if w.shape != per_kpt.shape:
                raise LossContractError(f"weights {tuple(w.shape)} vs keypoints {tuple(per_kpt.shape)}")
            per_kpt = per_kpt * w
        term = -per_kpt.sum() / n
        if normalize_uniformly:
            term = term / t.shape[-1]
        total = total + term
    return total


def decay_weight(t: int, t_max: int) -> float:
    """Linear decay 1 - (t - 1) / t_max for epoch t in 1..t_max."""
    if t_max < 1 or not 1 <= t <= t_max:
        raise LossContractError(f"epoch {t} outside 1..{t_max}")
    # single rounding: r(1) == 1.0 and r(t_max) == 1 / t_max exactly
    return (t_max - t + 1) / t_max


def loss_stage1(parts: dict, cfg: DistillConfig, t: int = 1, t_max: int = 1):
    """Combine label, feature and logit terms for first-stage distillation.

    ``parts`` maps "ori", "fea", "logit" to scalar losses; entries for
    disabled terms may be omitted.
    """
    r = decay_weight(t, t_max) if cfg.use_decay else 1.0
    total = 0.0
    if cfg.use_gt:
        total = total + parts["ori"]
    if cfg.use_fea:
        total = total + r * cfg.alpha * parts["fea"]
    if cfg.use_logit:
        total = total + r * cfg.beta * parts["logit"]
    return total


def loss_stage2(t_probs: PoseLogits, s_probs: PoseLogits, cfg: DistillConfig, batch_size: int | None = None):
    """gamma * unmasked logit distillation; no label term."""
    return cfg.gamma * loss_logit_kd(t_probs, s_probs, batch_size, cfg.normalize_uniformly)
