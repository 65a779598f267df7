import pytest
import torch

from posedistill import gradcheck
from posedistill.codec import SimCCConfig
from posedistill.model import (
    ContractError,
    FeatureProjection,
    ModelConfig,
    init_model,
    load_checkpoint,
    partition,
    project_features,
    reinit_head,
    save_checkpoint,
    tensor_digest,
)

CFG = ModelConfig(backbone_channels=[4, 8], feature_dim=6, head_hidden=16, num_keypoints=5,
                  simcc=SimCCConfig(input_width=16, input_height=16))


def tensors(module):
    return {k: v.clone() for k, v in module.state_dict().items()}


def test_init_deterministic():
    a, b = tensors(init_model(CFG, 3)), tensors(init_model(CFG, 3))
    assert a.keys() == b.keys()
    assert all(torch.equal(a[k], b[k]) for k in a)


def test_init_seed_matters():
    a, b = tensors(init_model(CFG, 3)), tensors(init_model(CFG, 4))
    assert any(not torch.equal(a[k], b[k]) for k in a)


def test_reinit_head_leaves_backbone_bits():
    m = init_model(CFG, 1)
    before = tensors(m)
    reinit_head(m, 99)
    after = tensors(m)
    for name in partition(m)["backbone"]:
        assert torch.equal(before[name], after[name])
    assert any(not torch.equal(before[n], after[n]) for n in partition(m)["head"] if n.endswith("weight"))


def test_partition_exact():
    m = init_model(CFG, 0)
    parts = partition(m)
    names = [n for n, _ in m.named_parameters()]
    assert sorted(parts["backbone"] + parts["head"]) == sorted(names)
    assert not set(parts["backbone"]) & set(parts["head"])


def test_shapes():
    m = init_model(CFG, 0)
    x = torch.rand(3, 1, 16, 16)
    feat = m.backbone_forward(x)
    assert tuple(feat.shape) == (3, CFG.feature_dim, *CFG.feature_hw)
    lg = m.head_forward(feat)
    assert tuple(lg.x.shape) == (3, 5, CFG.simcc.bins_x)
    assert tuple(lg.y.shape) == (3, 5, CFG.simcc.bins_y)


def test_zero_image_with_zero_final_layer():
    m = init_model(CFG, 0)
    with torch.no_grad():
        for p in m.backbone.parameters():
            p.zero_()
    assert not m.backbone_forward(torch.zeros(2, 1, 16, 16)).any()


def test_zero_feature_zero_bias_head():
    m = init_model(CFG, 0)
    lg = m.head_forward(torch.zeros(2, CFG.feature_dim, *CFG.feature_hw))
    assert not lg.x.any() and not lg.y.any()


def test_contract_errors():
    m = init_model(CFG, 0)
    with pytest.raises(ContractError):
        m.backbone_forward(torch.zeros(1, 1, 15, 16))
    with pytest.raises(ContractError):
        m.head_forward(torch.zeros(1, CFG.feature_dim + 1, *CFG.feature_hw))
    proj = FeatureProjection(4, 8)
    with pytest.raises(ContractError):
        project_features(proj, torch.zeros(1, 4, 3, 3), teacher_hw=(4, 4))
    with pytest.raises(ContractError):
        proj(torch.zeros(1, 5, 3, 3))


def test_projection_identity_and_shape():
    feat = torch.randn(2, 4, 3, 3)
    assert torch.equal(FeatureProjection(4, 4)(feat), feat)
    out = project_features(FeatureProjection(4, 8), feat, (3, 3))
    assert tuple(out.shape) == (2, 8, 3, 3)


def test_forward_deterministic_and_counted():
    m = init_model(CFG, 0)
    x = torch.rand(2, 1, 16, 16)
    a, b = m(x), m(x)
    assert torch.equal(a.x, b.x) and torch.equal(a.y, b.y)
    assert m.backbone_calls == 2


def test_width_validation():
    with pytest.raises(ValueError):
        ModelConfig(backbone_channels=[4, 0])


def test_checkpoint_round_trip(tmp_path):
    m = init_model(CFG, 5)
    path = save_checkpoint(m, tmp_path / "m.ckpt", extra={"note": "x"})
    back, header = load_checkpoint(path)
    assert header["extra"] == {"note": "x"}
    assert back.cfg == m.cfg
    assert tensor_digest(back) == tensor_digest(m)
    assert save_checkpoint(back, tmp_path / "m2.ckpt", extra={"note": "x"}).read_bytes() == path.read_bytes()


def test_checkpoint_rejects_garbage(tmp_path):
    p = tmp_path / "bad.ckpt"
    p.write_bytes(b"nope\n")
    with pytest.raises(ValueError):
        load_checkpoint(p)


def test_grad_check_quadratic():
    w = torch.tensor([3.0], dtype=torch.float64, requires_grad=True)
    assert gradcheck.grad_check(lambda: (w * w).sum(), [w]) < 1e-8


def test_grad_check_non_finite():
    w = torch.tensor([0.0], dtype=torch.float64, requires_grad=True)
    with pytest.raises(gradcheck.GradCheckError):
        gradcheck.grad_check(lambda: torch.log(w).sum(), [w])


@pytest.mark.parametrize("op", gradcheck.OPS)
def test_every_op_passes_gradcheck(op):
    fn, params = gradcheck._problems(0)[op]
    assert gradcheck.grad_check(fn, params) < gradcheck.TOLERANCE


def test_injected_fault_flagged():
    results = gradcheck.run_suite((0,), fault="loss_logit_kd")
    bad = [r for r in results if not r.ok]
    assert [r.op for r in bad] == ["loss_logit_kd"]
    assert bad[0].rel_err == pytest.approx(0.01, rel=0.05)


def test_unknown_fault_op():
    with pytest.raises(KeyError):
        gradcheck.run_suite((0,), fault="nope")
