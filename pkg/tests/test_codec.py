import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from posedistill.codec import CodecError, KeypointSet, PoseLogits, SimCCConfig, decode, encode


def one_kpt(x, y, v=2):
    return KeypointSet(np.array([[x, y]]), np.array([v]), ("body",))


def test_peak_bin_at_x_times_split_ratio():
    target, w = encode(one_kpt(5.0, 7.0), SimCCConfig(split_ratio=2.0))
    assert np.argmax(target.x_labels[0]) == 10
    assert w[0] == 1.0


def test_unlabeled_keypoint_masked():
    target, w = encode(one_kpt(5.0, 7.0, v=0), SimCCConfig())
    assert w[0] == 0.0
    assert not target.x_labels.any() and not target.y_labels.any()


def test_tiny_sigma_is_one_hot():
    target, _ = encode(one_kpt(5.0, 5.0), SimCCConfig(label_sigma=1e-3))
    row = target.x_labels[0]
    assert row[10] == pytest.approx(1.0)
    assert row.sum() == pytest.approx(1.0)
    assert np.count_nonzero(row > 1e-12) == 1


def test_out_of_frame_visible_keypoint_masked():
    cfg = SimCCConfig()
    for x, y in [(-1.0, 10.0), (10.0, 64.5), (70.0, 3.0)]:
        target, w = encode(one_kpt(x, y), cfg)
        assert w[0] == 0.0
        assert target.x_labels.sum() == 0.0


def test_non_finite_rejected():
    with pytest.raises(CodecError):
        encode(one_kpt(np.nan, 1.0), SimCCConfig())


def test_decode_one_hot():
    cfg = SimCCConfig()
    lx = np.zeros((1, cfg.bins_x))
    lx[0, 10] = 1.0
    ly = np.zeros((1, cfg.bins_y))
    ly[0, 3] = 1.0
    coords, scores = decode(PoseLogits(lx, ly), cfg)
    assert coords[0].tolist() == [5.0, 1.5]
    assert 0.0 < scores[0] <= 1.0


def test_decode_tie_breaks_low():
    cfg = SimCCConfig(input_width=2, input_height=2, split_ratio=2.0)
    coords, _ = decode(PoseLogits(np.full((1, 4), 0.25), np.full((1, 4), 0.25)), cfg)
    assert coords[0, 0] == 0.0


def test_decode_shape_mismatch():
    cfg = SimCCConfig()
    with pytest.raises(CodecError):
        decode(PoseLogits(np.zeros((1, 5)), np.zeros((1, cfg.bins_y))), cfg)


def test_config_validation():
    with pytest.raises(CodecError):
        SimCCConfig(split_ratio=0)
    with pytest.raises(CodecError):
        SimCCConfig(label_sigma=-1)
    with pytest.raises(CodecError):
        SimCCConfig(input_width=0)


def test_keypointset_validation():
    with pytest.raises(CodecError):
        KeypointSet(np.zeros((2, 2)), np.array([3, 0]))
    with pytest.raises(CodecError):
        KeypointSet(np.zeros((2, 2)), np.array([2, 2]), ("body", "tail"))


def test_round_trip_1000_keypoints():
    cfg = SimCCConfig(split_ratio=2.0)
    rng = np.random.default_rng(0)
    coords = rng.uniform(0.0, 63.0, size=(1000, 2))
    kps = KeypointSet(coords, np.full(1000, 2), ("hand",) * 1000)
    target, w = encode(kps, cfg)
    assert w.all()
    decoded, _ = decode(PoseLogits(target.x_labels, target.y_labels), cfg)
    assert np.abs(decoded - coords).max() <= 1 / (2 * cfg.split_ratio)


coord = st.floats(min_value=-5.0, max_value=70.0, allow_nan=False)


@settings(max_examples=60, deadline=None)
@given(x=coord, y=coord, v=st.sampled_from([0, 1, 2]), sigma=st.floats(0.05, 12.0), ratio=st.sampled_from([1.0, 2.0, 3.0]))
def test_encode_properties(x, y, v, sigma, ratio):
    cfg = SimCCConfig(split_ratio=ratio, label_sigma=sigma)
    target, w = encode(one_kpt(x, y, v), cfg)
    assert (target.x_labels >= 0).all() and (target.y_labels >= 0).all()
    if w[0] == 1.0:
        assert abs(target.x_labels.sum() - 1.0) < 1e-6
        assert abs(target.y_labels.sum() - 1.0) < 1e-6
        decoded, _ = decode(PoseLogits(target.x_labels, target.y_labels), cfg)
        assert np.abs(decoded[0] - [x, y]).max() <= 1 / (2 * ratio) + 1e-12
    else:
        assert target.x_labels.sum() == 0.0 and target.y_labels.sum() == 0.0


@settings(max_examples=40, deadline=None)
@given(shift=st.floats(-1e3, 1e3), seed=st.integers(0, 2**16))
def test_decode_invariant_to_row_shift(shift, seed):
    cfg = SimCCConfig(input_width=16, input_height=16)
    rng = np.random.default_rng(seed)
    lx, ly = rng.normal(size=(3, cfg.bins_x)), rng.normal(size=(3, cfg.bins_y))
    a, _ = decode(PoseLogits(lx, ly), cfg)
    b, _ = decode(PoseLogits(lx + shift, ly + shift), cfg)
    assert np.array_equal(a, b)
