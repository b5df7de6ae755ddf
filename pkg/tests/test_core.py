import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import shift
from tft.affine import TransformParams, bilinear_warp, layer_matrix
from tft.autodiff import Tensor, gradcheck
from tft.checkpoint import load_checkpoint, save_checkpoint
from tft.core import (AggregatedLayer, Tft, TftConfig, TransformationFunction, WeightRegressor, aggregated_apply,
                      one_hot, paper_augment, paper_spatial, paper_style, style_forward, style_weights, tft_forward,
                      validate_style_code)
from tft.data import ThetaRanges
from tft.errors import BadMagicError, ShapeError, TruncationError


@pytest.fixture
def rng():
    return np.random.default_rng(11)


def small_cfg(**kw):
    base = dict(channels=3, n_branches=2, hidden=4, kernel=3, depth=2)
    base.update(kw)
    return TftConfig(**base)


def test_presets():
    p = paper_spatial(16)
    assert (p.depth, p.hidden, p.kernel, p.n_branches) == (2, 32, 5, 8)
    a = paper_augment(16)
    assert (a.hidden, a.n_branches) == (64, 16)
    s = paper_style(32, 4)
    assert s.depth == 5 and s.mode == "style" and s.n_styles == 4


def test_config_validation():
    with pytest.raises(ValueError):
        TftConfig(channels=4, n_branches=3)
    with pytest.raises(ValueError):
        TftConfig(channels=4, mode="style")
    with pytest.raises(ValueError):
        TftConfig(channels=4, mode="other")


def test_spatial_weight_split():
    layer = AggregatedLayer(4, 8, 5, 3, 2, rng=np.random.default_rng(0))
    assert layer.w0 == 1.0
    assert sorted(layer.weights.tolist()) == [-1.0] * 4 + [1.0] * 4
    assert len(layer.weights) == layer.n_branches


def test_residual_only_when_weights_zero(rng):
    layer = AggregatedLayer(3, 2, 4, 3, 2, weights=[0.0, 0.0], rng=rng)
    f = rng.normal(size=(5, 5, 3))
    assert np.array_equal(aggregated_apply(layer, Tensor(f)).data, f)


def test_identical_branches_cancel(rng):
    layer = AggregatedLayer(3, 2, 4, 3, 2, rng=rng)
    layer.set_branch(1, layer.branch(0))
    f = rng.normal(size=(6, 6, 3))
    assert np.array_equal(aggregated_apply(layer, Tensor(f)).data, f)


def test_hand_set_1x1_kernels(rng):
    layer = AggregatedLayer(2, 2, 1, 1, 1, weights=[0.5, -2.0], rng=rng, final_relu=True)
    k1 = np.array([[1.0, -1.0], [2.0, 0.5]]).reshape(1, 1, 2, 2)
    k2 = np.array([[0.3, 0.0], [-1.0, 1.0]]).reshape(1, 1, 2, 2)
    layer.set_branch(0, TransformationFunction([k1], [np.array([0.1, -0.2])]))
    layer.set_branch(1, TransformationFunction([k2], [np.zeros(2)]))
    f = rng.normal(size=(3, 3, 2))
    t1 = np.maximum(f @ k1[0, 0] + [0.1, -0.2], 0)
    t2 = np.maximum(f @ k2[0, 0], 0)
    expected = f + 0.5 * t1 - 2.0 * t2
    assert np.allclose(aggregated_apply(layer, Tensor(f)).data, expected, rtol=0, atol=1e-14)


def test_branch_round_trip_matches_fused_evaluation(rng):
    layer = AggregatedLayer(3, 4, 5, 3, 3, rng=rng, final_relu=False)
    f = rng.normal(size=(2, 6, 6, 3))
    by_branch = sum(w * layer.branch(i)(Tensor(f)).data for i, w in enumerate(layer.weights))
    assert np.allclose(aggregated_apply(layer, Tensor(f)).data, f + by_branch, rtol=0, atol=1e-12)


def test_channel_mismatch(rng):
    layer = AggregatedLayer(3, 2, 4, 3, 2, rng=rng)
    with pytest.raises(ShapeError):
        aggregated_apply(layer, Tensor(np.zeros((4, 4, 2))))
    tft = Tft(small_cfg(), rng=rng)
    with pytest.raises(ShapeError):
        tft_forward(tft, Tensor(np.zeros((4, 4, 5))), TransformParams())


def test_zero_init_identity(rng):
    tft = Tft(small_cfg(), zero=True)
    f = rng.normal(size=(2, 7, 7, 3))
    assert np.array_equal(tft_forward(tft, Tensor(f), TransformParams()).data, f)


def test_zero_init_integer_translation_is_shift(rng):
    tft = Tft(small_cfg(), zero=True)
    f = rng.normal(size=(9, 9, 3))
    out = tft_forward(tft, Tensor(f), TransformParams(tx=2.0, ty=-3.0)).data
    assert np.array_equal(out, shift(f, 2, -3))


def test_stride_divides_translation(rng):
    tft = Tft(small_cfg(), stride=2, zero=True)
    f = rng.normal(size=(8, 8, 3))
    out = tft_forward(tft, Tensor(f), TransformParams(tx=4.0)).data
    assert np.array_equal(out, shift(f, 2, 0))


def test_per_sample_controls(rng):
    tft = Tft(small_cfg(), rng=rng)
    f = rng.normal(size=(2, 6, 6, 3))
    ps = [TransformParams(10.0), TransformParams(-20.0, 1.1)]
    both = tft_forward(tft, Tensor(f), ps).data
    for b in range(2):
        assert np.allclose(both[b], tft_forward(tft, Tensor(f[b]), ps[b]).data, rtol=0, atol=1e-12)
    with pytest.raises(ShapeError):
        tft_forward(tft, Tensor(f), ps[:1])


def test_shape_polymorphism(rng):
    tft = Tft(small_cfg(), rng=rng)
    for hw in ((3, 3), (44, 44), (17, 30)):
        out = tft_forward(tft, Tensor(rng.normal(size=(*hw, 3))), TransformParams(5.0))
        assert out.shape == (*hw, 3)


def test_pre_and_post_are_independent(rng):
    tft = Tft(small_cfg(), rng=rng)
    post_before = {k: v.data.copy() for k, v in tft.post.named_parameters().items()}
    for p in tft.pre.parameters():
        p.data = p.data + 1.0
    assert all(np.array_equal(v.data, post_before[k]) for k, v in tft.post.named_parameters().items())
    assert not any(a is b for a in tft.pre.parameters() for b in tft.post.parameters())


def test_tft_gradients(rng):
    tft = Tft(small_cfg(), rng=rng)
    f = Tensor(rng.normal(size=(5, 5, 3)))
    p = TransformParams(20.0, 1.05, 0.5, -1.0)
    res = gradcheck(lambda x: (tft_forward(tft, x, p) ** 2).sum(), [f])
    assert res.ok, res
    k = tft.post.kernels[0]
    res = gradcheck(lambda kk: (tft_forward(tft, f, p) ** 2).sum(), [k], max_entries=40)
    assert res.ok, res


# ---- style mode


def style_tft(rng, zero=False):
    return Tft(small_cfg(mode="style", n_styles=3, n_branches=3), rng=rng, zero=zero)


def test_style_code_validation():
    assert validate_style_code(one_hot(1, 3), 3).tolist() == [0.0, 1.0, 0.0]
    validate_style_code([0.25, 0.75, 0.0], 3)
    with pytest.raises(ShapeError):
        validate_style_code([1.0, 0.0], 3)
    with pytest.raises(ValueError):
        validate_style_code([0.5, 0.6, -0.1], 3)
    with pytest.raises(ValueError):
        validate_style_code([0.5, 0.4, 0.0], 3)


def test_zero_regressor_gives_zero_map(rng):
    tft = style_tft(rng, zero=True)
    pre, post = style_weights(tft.regressor, one_hot(0, 3))
    assert not pre.any() and not post.any()
    out = style_forward(tft, Tensor(rng.normal(size=(6, 6, 3))), one_hot(2, 3))
    assert np.array_equal(out.data, np.zeros((6, 6, 3)))


def test_distinct_codes_distinct_weights(rng):
    reg = WeightRegressor(4, 8, 6, rng=rng)
    ws = [np.concatenate(style_weights(reg, one_hot(i, 4))) for i in range(4)]
    for i in range(4):
        for j in range(i + 1, 4):
            assert np.linalg.norm(ws[i] - ws[j]) > 0


def test_mixture_codes_valid(rng):
    reg = WeightRegressor(2, 8, 6, rng=rng)
    pre, post = style_weights(reg, [0.5, 0.5])
    assert pre.shape == (3,) and post.shape == (3,) and np.all(np.isfinite(pre))


def test_style_batch_codes_match_single(rng):
    tft = style_tft(rng)
    f = rng.normal(size=(2, 5, 5, 3))
    codes = np.stack([one_hot(0, 3), one_hot(2, 3)])
    both = style_forward(tft, Tensor(f), codes).data
    for b in range(2):
        assert np.allclose(both[b], style_forward(tft, Tensor(f[b]), codes[b]).data, rtol=0, atol=1e-12)


def test_style_gradients_reach_regressor(rng):
    tft = style_tft(rng)
    f = Tensor(rng.normal(size=(4, 4, 3)))
    res = gradcheck(lambda w: (style_forward(tft, f, one_hot(1, 3)) ** 2).sum(), [tft.regressor.w2],
                    max_entries=30)
    assert res.ok, res


# ---- checkpoints


def test_checkpoint_round_trip(tmp_path, rng):
    tft = Tft(small_cfg(), tap=2, stride=2, rng=rng)
    path = tmp_path / "m.tftc"
    save_checkpoint(tft, path)
    back = load_checkpoint(path)
    assert (back.tap, back.stride, back.config) == (2, 2, tft.config)
    f = Tensor(rng.normal(size=(6, 6, 3)))
    p = TransformParams(15.0, 0.9, 2.0, 1.0)
    a, b = tft_forward(tft, f, p).data, tft_forward(back, f, p).data
    assert np.max(np.abs(a - b)) < 1e-5


def test_style_checkpoint_round_trip(tmp_path, rng):
    tft = style_tft(rng)
    save_checkpoint(tft, tmp_path / "s.tftc")
    back = load_checkpoint(tmp_path / "s.tftc")
    f = Tensor(rng.normal(size=(5, 5, 3)))
    assert np.max(np.abs(style_forward(tft, f, one_hot(1, 3)).data - style_forward(back, f, one_hot(1, 3)).data)) < 1e-5


def test_checkpoint_corruption(tmp_path, rng):
    path = tmp_path / "m.tftc"
    save_checkpoint(Tft(small_cfg(), rng=rng), path)
    raw = path.read_bytes()
    (tmp_path / "bad.tftc").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(BadMagicError) as exc:
        load_checkpoint(tmp_path / "bad.tftc")
    assert exc.value.code == "bad-magic"
    (tmp_path / "short.tftc").write_bytes(raw[: len(raw) // 2])
    with pytest.raises(TruncationError):
        load_checkpoint(tmp_path / "short.tftc")


@given(st.sampled_from(ThetaRanges.mnist_grid().rotations), st.sampled_from((0.9, 1.0, 1.1)),
       st.integers(-7, 7), st.integers(-7, 7))
@settings(max_examples=30, deadline=None)
def test_zero_kernel_tft_equals_affine_warp(theta, s, tx, ty):
    tft = Tft(small_cfg(), zero=True)
    f = np.random.default_rng(abs(tx * 100 + ty)).normal(size=(12, 12, 3))
    p = TransformParams(theta, s, tx, ty)
    want = bilinear_warp(Tensor(f), layer_matrix(p, 12, 12)).data
    assert np.max(np.abs(tft_forward(tft, Tensor(f), p).data - want)) < 1e-10
