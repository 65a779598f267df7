import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from posedistill import losses
from posedistill.codec import PoseLogits, SimCCTarget
from posedistill.losses import DistillConfig

D = torch.float64


def t(x):
    return torch.tensor(x, dtype=D)


def one_axis(x):
    """(1, 1, L) tensor on the x axis with an all-zero y axis."""
    x = t([[x]])
    return PoseLogits(x, torch.zeros_like(x))


def test_feature_loss_identity_and_hand_value():
    f = torch.randn(3, 4, 5, dtype=D)
    assert losses.loss_feature(f, f).item() == 0.0
    ft = t([[[1.0, 0.0], [0.0, 1.0]]])
    assert abs(losses.loss_feature(ft, torch.zeros_like(ft)).item() - 0.5) < 1e-9


def test_feature_loss_homogeneous():
    a, b = torch.randn(2, 3, 3, dtype=D), torch.randn(2, 3, 3, dtype=D)
    assert losses.loss_feature(3 * a, 3 * b).item() == pytest.approx(9 * losses.loss_feature(a, b).item(), rel=1e-12)


def test_feature_loss_shape_mismatch():
    with pytest.raises(losses.LossContractError):
        losses.loss_feature(torch.zeros(1, 2, 2), torch.zeros(2, 2, 2))


def test_original_loss_hand_value():
    s = one_axis([0.5, 0.5])
    v = SimCCTarget(t([[[1.0, 0.0]]]), t([[[0.0, 0.0]]]))
    val = losses.loss_original(s, v, t([[1.0]])).item()
    assert abs(val - 0.5 * math.log(2)) < 1e-9
    assert abs(val - 0.346574) < 1e-6


def test_original_loss_masked_and_perfect():
    s = one_axis([0.5, 0.5])
    v = SimCCTarget(t([[[1.0, 0.0]]]), t([[[0.0, 0.0]]]))
    assert losses.loss_original(s, v, t([[0.0]])).item() == 0.0
    perfect = one_axis([1.0 - 1e-15, 1e-15])
    assert losses.loss_original(perfect, v, t([[1.0]])).item() < 1e-12


def test_original_loss_zero_weight_rows_have_zero_gradient():
    gen = torch.Generator().manual_seed(0)
    lx = torch.randn(2, 3, 8, generator=gen, dtype=D, requires_grad=True)
    ly = torch.randn(2, 3, 8, generator=gen, dtype=D, requires_grad=True)
    v = SimCCTarget(torch.softmax(torch.randn(2, 3, 8, generator=gen, dtype=D), -1),
                    torch.softmax(torch.randn(2, 3, 8, generator=gen, dtype=D), -1))
    w = t([[1.0, 0.0, 1.0], [0.0, 1.0, 1.0]])
    losses.loss_original(losses.to_probs(PoseLogits(lx, ly)), v, w).backward()
    assert (lx.grad[0, 1] == 0).all() and (lx.grad[1, 0] == 0).all()
    assert (ly.grad[0, 1] == 0).all()
    assert lx.grad[0, 0].abs().sum() > 0


def test_logit_kd_hand_values():
    half = one_axis([0.5, 0.5])
    assert abs(losses.loss_logit_kd(half, half).item() - math.log(2)) < 1e-9
    assert abs(losses.loss_logit_kd(one_axis([1.0, 0.0]), half).item() - math.log(2)) < 1e-9
    delta = one_axis([1.0, 0.0])
    assert losses.loss_logit_kd(delta, delta).item() == 0.0


def test_logit_kd_batch_normalization():
    # two identical samples averaged over N=2 equal one sample
    x = t([[[0.25, 0.75]], [[0.25, 0.75]]])
    s = t([[[0.5, 0.5]], [[0.5, 0.5]]])
    pair = losses.loss_logit_kd(PoseLogits(x, torch.zeros_like(x)), PoseLogits(s, s))
    single = losses.loss_logit_kd(PoseLogits(x[:1], torch.zeros_like(x[:1])), PoseLogits(s[:1], s[:1]))
    assert pair.item() == pytest.approx(single.item(), rel=1e-15)


def test_masked_kd():
    gen = torch.Generator().manual_seed(1)
    tp = losses.to_probs(PoseLogits(torch.randn(1, 2, 6, generator=gen, dtype=D), torch.randn(1, 2, 6, generator=gen, dtype=D)))
    sp = losses.to_probs(PoseLogits(torch.randn(1, 2, 6, generator=gen, dtype=D), torch.randn(1, 2, 6, generator=gen, dtype=D)))
    ones = torch.ones(1, 2, dtype=D)
    assert torch.equal(losses.loss_logit_kd_masked(tp, sp, ones), losses.loss_logit_kd(tp, sp))
    assert losses.loss_logit_kd_masked(tp, sp, torch.zeros(1, 2, dtype=D)).item() == 0.0
    first = losses.loss_logit_kd_masked(tp, sp, t([[1.0, 0.0]])).item()
    restricted = losses.loss_logit_kd(PoseLogits(tp.x[:, :1], tp.y[:, :1]), PoseLogits(sp.x[:, :1], sp.y[:, :1])).item()
    assert abs(first - restricted) < 1e-12


def test_decay_weight():
    assert losses.decay_weight(1, 7) == 1.0
    assert abs(losses.decay_weight(6, 10) - 0.5) < 1e-12
    assert abs(losses.decay_weight(10, 10) - 0.1) < 1e-12
    vals = [losses.decay_weight(e, 50) for e in range(1, 51)]
    assert all(a > b for a, b in zip(vals, vals[1:]))
    for bad in [(0, 10), (11, 10), (1, 0)]:
        with pytest.raises(losses.LossContractError):
            losses.decay_weight(*bad)


def test_stage1_hand_values():
    cfg = DistillConfig(alpha=0.00005, beta=0.1, use_decay=True)
    parts = {"ori": 1.0, "fea": 100.0, "logit": 2.0}
    assert abs(losses.loss_stage1(parts, cfg, t=1, t_max=10) - 1.205) < 1e-9
    assert abs(losses.loss_stage1(parts, cfg, t=6, t_max=10) - 1.1025) < 1e-9
    off = DistillConfig(use_fea=False, use_logit=False)
    assert losses.loss_stage1(parts, off, 3, 10) == 1.0
    nodecay = DistillConfig(use_decay=False)
    assert abs(losses.loss_stage1(parts, nodecay, t=6, t_max=10) - 1.205) < 1e-9
    nogt = DistillConfig(use_gt=False, use_fea=False)
    assert abs(losses.loss_stage1(parts, nogt, 1, 10) - 0.2) < 1e-12


def test_stage1_flags_off_equals_original_exactly():
    s = losses.to_probs(PoseLogits(torch.randn(2, 3, 8, dtype=D), torch.randn(2, 3, 8, dtype=D)))
    v = SimCCTarget(torch.softmax(torch.randn(2, 3, 8, dtype=D), -1), torch.softmax(torch.randn(2, 3, 8, dtype=D), -1))
    ori = losses.loss_original(s, v, torch.ones(2, 3, dtype=D))
    off = DistillConfig(use_fea=False, use_logit=False)
    assert torch.equal(losses.loss_stage1({"ori": ori}, off, 4, 9), ori)


def test_stage2_values():
    half, delta = one_axis([0.5, 0.5]), one_axis([1.0, 0.0])
    assert abs(losses.loss_stage2(delta, half, DistillConfig(gamma=2.0)).item() - 2 * math.log(2)) < 1e-9
    assert losses.loss_stage2(delta, half, DistillConfig(gamma=0.0)).item() == 0.0
    unit = losses.loss_stage2(delta, half, DistillConfig(gamma=1.0)).item()
    assert unit == losses.loss_logit_kd(delta, half).item()


def test_normalize_uniformly_switch():
    half = one_axis([0.5, 0.5])
    v = SimCCTarget(t([[[1.0, 0.0]]]), t([[[0.0, 0.0]]]))
    assert losses.loss_logit_kd(half, half, normalize_uniformly=True).item() == pytest.approx(math.log(2) / 2)
    assert losses.loss_original(half, v, t([[1.0]]), normalize_uniformly=True).item() == pytest.approx(math.log(2) / 2)


def test_config_validation():
    with pytest.raises(ValueError):
        DistillConfig(alpha=-1)
    with pytest.raises(ValueError):
        DistillConfig(temperature=0)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(1, 3), k=st.integers(1, 4), bins=st.integers(2, 12))
def test_cross_entropy_at_least_entropy(seed, n, k, bins):
    gen = torch.Generator().manual_seed(seed)
    tp = losses.to_probs(PoseLogits(torch.randn(n, k, bins, generator=gen, dtype=D) * 3,
                                    torch.randn(n, k, bins, generator=gen, dtype=D) * 3))
    sp = losses.to_probs(PoseLogits(torch.randn(n, k, bins, generator=gen, dtype=D) * 3,
                                    torch.randn(n, k, bins, generator=gen, dtype=D) * 3))
    assert losses.loss_logit_kd(tp, sp).item() >= losses.loss_logit_kd(tp, tp).item() - 1e-12


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_feature_loss_nonnegative_zero_iff_equal(seed):
    rng = np.random.default_rng(seed)
    a = torch.from_numpy(rng.normal(size=(2, 3, 2)))
    b = a.clone()
    assert losses.loss_feature(a, b).item() == 0.0
    b[0, 0, 0] += 1e-3
    assert losses.loss_feature(a, b).item() > 0.0
