import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import affine_by_hand, shift, smooth_noise, warp_loops
from tft.affine import (TransformParams, apply_mask, bilinear_warp, invert_affine, layer_matrix, make_affine,
                        map_center, scale_params_to_layer, translation_matrix, validate_affine, warp_backward)
from tft.autodiff import Tensor, backward, gradcheck
from tft.errors import ShapeError, SingularMatrixError


@pytest.fixture
def rng():
    return np.random.default_rng(7)


def test_params_validation():
    with pytest.raises(ValueError):
        TransformParams(scale=0.0)
    with pytest.raises(ValueError):
        TransformParams(theta=float("nan"))
    assert TransformParams().is_identity


def test_identity_matrix():
    assert np.array_equal(make_affine(TransformParams()), np.eye(3))
    assert np.array_equal(make_affine(TransformParams(), center=(21.5, 21.5)), np.eye(3))


def test_rotation_90_block():
    m = make_affine(TransformParams(theta=90.0))
    assert np.allclose(m[:2, :2], [[0.0, -1.0], [1.0, 0.0]], atol=1e-15)


def test_composed_matrix_matches_hand_product():
    got = make_affine(TransformParams(30.0, 1.1, 3.0, -2.0), center=(21.5, 21.5))
    assert np.max(np.abs(got - affine_by_hand(30.0, 1.1, 3.0, -2.0, 21.5, 21.5))) < 1e-12


def test_make_affine_rejects_bad_scale():
    p = object.__new__(TransformParams)
    object.__setattr__(p, "theta", 0.0)
    object.__setattr__(p, "scale", -1.0)
    object.__setattr__(p, "tx", 0.0)
    object.__setattr__(p, "ty", 0.0)
    with pytest.raises(ValueError):
        make_affine(p)


def test_order_is_configurable():
    p = TransformParams(20.0, 1.2, 4.0, 1.0)
    assert not np.allclose(make_affine(p, order="TRS"), make_affine(p, order="SRT"))
    with pytest.raises(ValueError):
        make_affine(p, order="TTS")


def test_map_center():
    assert map_center(44, 44) == (21.5, 21.5)
    assert map_center(4, 6) == (2.5, 1.5)


def test_singular_and_malformed_matrices():
    with pytest.raises(SingularMatrixError):
        validate_affine(np.diag([0.0, 1.0, 1.0]))
    bad = np.eye(3)
    bad[2, 0] = 0.5
    with pytest.raises(SingularMatrixError):
        validate_affine(bad)
    with pytest.raises(ShapeError):
        validate_affine(np.eye(2))
    with pytest.raises(SingularMatrixError):
        bilinear_warp(Tensor(np.ones((3, 3, 1))), np.diag([1e-13, 1.0, 1.0]))


def test_invert_affine_is_exact_for_translations():
    m = translation_matrix(3.25, -7.5)
    assert np.array_equal(invert_affine(m), translation_matrix(-3.25, 7.5))


def test_warp_identity_exact(rng):
    f = rng.normal(size=(6, 5, 3))
    assert np.array_equal(bilinear_warp(Tensor(f), np.eye(3)).data, f)


def test_warp_integer_translation_is_shift(rng):
    f = rng.normal(size=(8, 9, 2))
    out = bilinear_warp(Tensor(f), translation_matrix(3, 0)).data
    assert np.array_equal(out, shift(f, 3, 0))
    out = bilinear_warp(Tensor(f), translation_matrix(-2, 4)).data
    assert np.array_equal(out, shift(f, -2, 4))


def test_warp_half_pixel_split():
    f = np.zeros((5, 5, 1))
    f[2, 1] = 1.0
    out = bilinear_warp(Tensor(f), translation_matrix(0.5, 0)).data[..., 0]
    assert out[2, 1] == 0.5 and out[2, 2] == 0.5
    assert out.sum() == 1.0


def test_warp_matches_pixel_loop(rng):
    f = rng.normal(size=(9, 7, 2))
    for p in (TransformParams(17.0, 0.93, 1.3, -0.6), TransformParams(-30.0, 1.1, -2.0, 2.5)):
        m = make_affine(p, map_center(9, 7))
        assert np.max(np.abs(bilinear_warp(Tensor(f), m).data - warp_loops(f, m))) < 1e-12


def test_warp_batched_per_sample_matrices(rng):
    f = rng.normal(size=(3, 6, 6, 2))
    mats = np.stack([make_affine(TransformParams(t, 1.0, 1.0, 0.0), (2.5, 2.5)) for t in (0.0, 10.0, -25.0)])
    out = bilinear_warp(Tensor(f), mats).data
    for b in range(3):
        assert np.max(np.abs(out[b] - warp_loops(f[b], mats[b]))) < 1e-12
    with pytest.raises(ShapeError):
        bilinear_warp(Tensor(f), mats[:2])


def test_warp_batch_equals_single_warps_bitwise(rng):
    f = rng.normal(size=(5, 7, 9, 3))
    mats = np.stack([make_affine(TransformParams(rng.uniform(-60, 60), rng.uniform(0.8, 1.2), rng.uniform(-3, 3),
                                                 rng.uniform(-3, 3)), map_center(7, 9)) for _ in range(5)])
    mats[2] = translation_matrix(2, -1)
    out = bilinear_warp(Tensor(f), mats).data
    for b in range(5):
        assert np.array_equal(out[b], bilinear_warp(Tensor(f[b]), mats[b]).data)


def test_warp_backward_identity_and_half_pixel(rng):
    g = rng.normal(size=(4, 4, 2))
    assert np.array_equal(warp_backward(np.zeros_like(g), np.eye(3), g), g)
    up = np.zeros((5, 5, 1))
    up[2, 2] = 1.0
    gx = warp_backward(np.zeros_like(up), translation_matrix(0.5, 0), up)[..., 0]
    assert gx[2, 1] == 0.5 and gx[2, 2] == 0.5 and gx.sum() == 1.0


def test_warp_backward_matches_autodiff_and_fd(rng):
    f = Tensor(rng.normal(size=(5, 6, 2)))
    m = make_affine(TransformParams(12.0, 1.05, 0.7, -0.2), map_center(5, 6))
    up = rng.normal(size=(5, 6, 2))
    f.requires_grad = True
    (g,) = backward((bilinear_warp(f, m) * Tensor(up)).sum(), [f])
    assert np.allclose(g, warp_backward(f, m, up), rtol=0, atol=1e-14)
    res = gradcheck(lambda t: (bilinear_warp(t, m) * Tensor(up)).sum(), [f], rtol=1e-6)
    assert res.ok, res


def test_scale_params_to_layer():
    p = TransformParams(30.0, 1.1, 8.0, -4.0)
    assert scale_params_to_layer(p, 1) == p
    q = scale_params_to_layer(p, 4)
    assert (q.tx, q.ty, q.theta, q.scale) == (2.0, -1.0, 30.0, 1.1)
    with pytest.raises(ValueError):
        scale_params_to_layer(p, 0)


def test_layer_matrix_uses_stride():
    m = layer_matrix(TransformParams(tx=8.0), 11, 11, cumulative_stride=4)
    assert np.array_equal(m, translation_matrix(2.0, 0.0))


def test_mask(rng):
    f = rng.normal(size=(4, 4, 3))
    assert np.array_equal(apply_mask(Tensor(f), np.ones((4, 4))).data, f)
    assert np.array_equal(apply_mask(Tensor(f), np.zeros((4, 4))).data, np.zeros_like(f))
    checker = (np.indices((4, 4)).sum(axis=0) % 2).astype(float)
    out = apply_mask(Tensor(np.full((4, 4, 2), 3.0)), checker).data
    assert np.array_equal(out, 3.0 * np.repeat(checker[..., None], 2, axis=-1))
    with pytest.raises(ShapeError):
        apply_mask(Tensor(f), np.ones((3, 4)))
    with pytest.raises(ValueError):
        apply_mask(Tensor(f), np.full((4, 4), 1.5))


# ---- properties

shifts = st.integers(-2, 2)


@given(shifts, shifts, shifts, shifts, st.integers(0, 2**31 - 1))
@settings(max_examples=40, deadline=None)
def test_translation_composition(a, b, c, d, seed):
    f = np.zeros((14, 14, 1))
    f[4:10, 4:10] = np.random.default_rng(seed).normal(size=(6, 6, 1))
    two = bilinear_warp(bilinear_warp(Tensor(f), translation_matrix(a, b)), translation_matrix(c, d)).data
    one = bilinear_warp(Tensor(f), translation_matrix(a + c, b + d)).data
    assert np.array_equal(two, one)
    assert two.sum() == pytest.approx(f.sum(), abs=1e-12)


@given(st.floats(-30, 30), st.floats(0.9, 1.1), st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2**31 - 1))
@settings(max_examples=30, deadline=None)
def test_inverse_round_trip_on_smooth_maps(theta, s, tx, ty, seed):
    H = W = 32
    f = smooth_noise(np.random.default_rng(seed), (H, W))[..., None]
    m = make_affine(TransformParams(theta, s, tx, ty), map_center(H, W))
    back = bilinear_warp(bilinear_warp(Tensor(f), m), invert_affine(m)).data
    border = int(np.ceil(max(abs(tx), abs(ty)))) + 2
    ys, xs = np.mgrid[0:H, 0:W]
    mx, my, _ = m @ np.stack([xs.ravel(), ys.ravel(), np.ones(H * W)])
    # a point survives the round trip only if its intermediate position stayed on the map
    inner = ((xs >= border) & (xs < W - border) & (ys >= border) & (ys < H - border)).ravel()
    inner &= (mx >= 1) & (mx <= W - 2) & (my >= 1) & (my <= H - 2)
    inner = inner.reshape(H, W)
    assert np.max(np.abs(back[inner] - f[inner])) <= 0.15


@given(st.floats(-45, 45), st.floats(0.8, 1.25), st.integers(0, 2**31 - 1))
@settings(max_examples=25, deadline=None)
def test_channel_independence_and_linearity(theta, s, seed):
    r = np.random.default_rng(seed)
    x, y = r.normal(size=(2, 7, 8, 3))
    m = make_affine(TransformParams(theta, s, 0.5, -1.5), map_center(7, 8))
    wx = bilinear_warp(Tensor(x), m).data
    per = np.stack([bilinear_warp(Tensor(x[..., c : c + 1]), m).data[..., 0] for c in range(3)], axis=-1)
    assert np.array_equal(wx, per)
    a = float(r.normal())
    lhs = bilinear_warp(Tensor(a * x + y), m).data
    assert np.max(np.abs(lhs - (a * wx + bilinear_warp(Tensor(y), m).data))) < 1e-10
