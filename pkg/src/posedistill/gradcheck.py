"""Central finite-difference check of autograd gradients.

``grad_check`` is the oracle; ``run_suite`` applies it to every loss and
forward op on small double-precision problems.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch

from . import losses
from .codec import KeypointSet, PoseLogits, SimCCConfig, SimCCTarget, encode
from .model import FeatureProjection, ModelConfig, init_model, project_features

TOLERANCE = 1e-4


class GradCheckError(RuntimeError):
    pass


def _analytic(fn, params):
    out = fn()
    if not torch.isfinite(out).all():
        raise GradCheckError(f"non-finite value {float(out.detach())} at the check point")
    return torch.autograd.grad(out, params, allow_unused=True)


def grad_check(
    fn: Callable[[], torch.Tensor],
    params: Sequence[torch.Tensor],
    eps: float = 1e-5,
    grad_fn: Callable[[], Sequence[torch.Tensor]] | None = None,
    floor: float = 1e-10,
) -> float:
    """Worst elementwise relative error between analytic and central-difference gradients.

    The relative error of an element is |a - n| / max(|a|, |n|, floor), where
    ``a`` is the analytic and ``n`` the numeric derivative. ``grad_fn``
    replaces autograd as the analytic source (used for fault injection).
    """
    params = list(params)
    grads = grad_fn() if grad_fn is not None else _analytic(fn, params)
    worst = 0.0
    with torch.no_grad():
        for p, g in zip(params, grads):
            g = torch.zeros_like(p) if g is None else g
            flat = p.view(-1)
            gflat = g.reshape(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                f_plus = float(fn())
                flat[i] = orig - eps
                f_minus = float(fn())
                flat[i] = orig
                if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                    raise GradCheckError(f"non-finite value near element {i}")
                num = (f_plus - f_minus) / (2 * eps)
                ana = gflat[i].item()
                denom = max(abs(ana), abs(num), floor)
                worst = max(worst, abs(ana - num) / denom)
    return worst


@dataclass
class CheckResult:
    op: str
    seed: int
    rel_err: float

    @property
    def ok(self) -> bool:
        return self.rel_err < TOLERANCE


def _tiny_cfg(seed: int) -> ModelConfig:
    return ModelConfig(
        backbone_channels=[2, 3],
        feature_dim=3,
        head_hidden=4,
        num_keypoints=3,
        simcc=SimCCConfig(input_width=8, input_height=8, split_ratio=2.0, label_sigma=2.0),
        init_seed=seed,
    )


def _problems(seed: int) -> dict[str, tuple]:
    """op name -> (fn, params). Each closure is built fresh in float64."""
    gen = torch.Generator().manual_seed(seed)
    rng = np.random.default_rng(seed)
    cfg = _tiny_cfg(seed)
    n, k, bins = 2, cfg.num_keypoints, cfg.simcc.bins_x

    def randn(*shape, grad=False):
        t = torch.randn(*shape, generator=gen, dtype=torch.float64)
        return t.requires_grad_(grad)

    s_x, s_y = randn(n, k, bins, grad=True), randn(n, k, bins, grad=True)
    t_x, t_y = randn(n, k, bins), randn(n, k, bins)
    t_probs = losses.to_probs(PoseLogits(t_x, t_y))

    def s_probs():
        return losses.to_probs(PoseLogits(s_x, s_y))

    kps = [KeypointSet(rng.uniform(0, 8, (k, 2)), rng.integers(1, 3, k), ("body",) * k) for _ in range(n)]
    enc = [encode(kp, cfg.simcc) for kp in kps]
    target = SimCCTarget(
        torch.from_numpy(np.stack([e[0].x_labels for e in enc])),
        torch.from_numpy(np.stack([e[0].y_labels for e in enc])),
    )
    weights = torch.from_numpy(rng.integers(0, 2, (n, k)).astype(np.float64))
    feat_t = randn(n, 5, 2, 2)
    feat_s = randn(n, 3, 2, 2, grad=True)
    dcfg = losses.DistillConfig(gamma=1.5)

    model = init_model(cfg, seed).double()
    image = randn(n, 1, 8, 8, grad=True)
    proj = FeatureProjection(3, 5, seed=seed).double()
    w_feat = randn(n, cfg.feature_dim, *cfg.feature_hw)
    w_lx, w_ly = randn(n, k, bins), randn(n, k, bins)
    w_proj = randn(n, 5, 2, 2)
    feat_in = randn(n, cfg.feature_dim, *cfg.feature_hw)
    proj_fn = lambda: (project_features(proj, feat_s.detach()) * w_proj).sum()  # noqa: E731

    def head_fn():
        lg = model.head_forward(feat_in)
        return (lg.x * w_lx).sum() + (lg.y * w_ly).sum()

    def stage1_fn():
        parts = {
            "ori": losses.loss_original(s_probs(), target, weights),
            "fea": losses.loss_feature(feat_t, project_features(proj, feat_s)),
            "logit": losses.loss_logit_kd(t_probs, s_probs()),
        }
        return losses.loss_stage1(parts, losses.DistillConfig(alpha=0.5), t=3, t_max=10)

    return {
        "loss_feature": (lambda: losses.loss_feature(feat_t, proj(feat_s)), [feat_s]),
        "loss_original": (lambda: losses.loss_original(s_probs(), target, weights), [s_x, s_y]),
        "loss_logit_kd": (lambda: losses.loss_logit_kd(t_probs, s_probs()), [s_x, s_y]),
        "loss_logit_kd_masked": (lambda: losses.loss_logit_kd_masked(t_probs, s_probs(), weights), [s_x, s_y]),
        "loss_stage1": (stage1_fn, [s_x, s_y, feat_s, *proj.parameters()]),
        "loss_stage2": (lambda: losses.loss_stage2(t_probs, s_probs(), dcfg), [s_x, s_y]),
        "backbone_forward": (lambda: (model.backbone_forward(image) * w_feat).sum(),
                             [*model.backbone.parameters(), image]),
        "head_forward": (head_fn, list(model.head.parameters())),
        "project_features": (proj_fn, list(proj.parameters())),
    }


OPS = tuple(_problems(0))


def run_suite(seeds: Sequence[int] = (0, 1, 2), fault: str | None = None, fault_scale: float = 1.01) -> list[CheckResult]:
    """Check every op at every seed; ``fault`` scales that op's analytic gradient."""
    if fault is not None and fault not in OPS:
        raise KeyError(f"unknown op {fault!r}; known: {', '.join(OPS)}")
    results = []
    for seed in seeds:
        for name, (fn, params) in _problems(seed).items():
            grad_fn = None
            if name == fault:
                grad_fn = lambda fn=fn, params=params: [  # noqa: E731
                    None if g is None else g * fault_scale for g in _analytic(fn, params)
                ]
            results.append(CheckResult(name, seed, grad_check(fn, params, grad_fn=grad_fn)))
    return results
