"""Top-down spatial controls and the differentiable affine warp.

Coordinates: ``x`` is the column index, ``y`` the row index (increasing
downward). A matrix maps source coordinates to target coordinates; the warp
iterates over target pixels and samples the source at ``inv(M) @ (x, y, 1)``
with bilinear weights, filling out-of-bounds neighbours with zero.
"""

import functools
import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .autodiff import Tensor, as_tensor, make_node, mul
from .errors import ShapeError, SingularMatrixError

# Sub-pixel offsets closer than this to an integer are treated as exact.
SNAP = 1e-9


@dataclass(frozen=True)
class TransformParams:
    """Rotation (degrees), isotropic scale and translation (pixels)."""

    theta: float = 0.0
    scale: float = 1.0
    tx: float = 0.0
    ty: float = 0.0

    def __post_init__(self):
        vals = (self.theta, self.scale, self.tx, self.ty)
        if not all(math.isfinite(float(v)) for v in vals):
            raise ValueError(f"transform parameters must be finite, got {vals}")
        if self.scale <= 0:
            raise ValueError(f"scale must be positive, got {self.scale}")

    @classmethod
    def identity(cls):
        return cls()

    def as_array(self):
        return np.array([self.theta, self.scale, self.tx, self.ty], dtype=np.float64)

    @property
    def is_identity(self):
        return self.theta == 0 and self.scale == 1 and self.tx == 0 and self.ty == 0


def rotation_matrix(theta_deg):
    t = math.radians(theta_deg)
    c, s = math.cos(t), math.sin(t)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def scale_matrix(s):
    return np.array([[s, 0.0, 0.0], [0.0, s, 0.0], [0.0, 0.0, 1.0]])


def translation_matrix(tx, ty):
    return np.array([[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]])


def map_center(height, width):
    """Rotation/scaling center ``(x, y)`` of an ``height x width`` map."""
    return ((width - 1) / 2.0, (height - 1) / 2.0)


def make_affine(params, center=(0.0, 0.0), order="TRS"):
    """Compose the 3x3 homogeneous transform for ``params`` about ``center``.

    ``order`` lists the factors left to right: the default ``"TRS"`` gives
    ``C @ M_tran @ M_rot @ M_scale @ inv(C)``, i.e. scale first, then rotate,
    then translate, all relative to ``center``.
    """
    if params.scale <= 0:
        raise ValueError(f"scale must be positive, got {params.scale}")
    if sorted(order) != ["R", "S", "T"]:
        raise ValueError(f"order must be a permutation of 'TRS', got {order!r}")
    factors = {
        "T": translation_matrix(params.tx, params.ty),
        "R": rotation_matrix(params.theta),
        "S": scale_matrix(params.scale),
    }
    cx, cy = center
    m = translation_matrix(cx, cy)
    for key in order:
        m = m @ factors[key]
    return m @ translation_matrix(-cx, -cy)


def validate_affine(matrix):
    m = np.asarray(matrix, dtype=np.float64)
    if m.shape != (3, 3):
        raise ShapeError(f"affine matrix must be 3x3, got {m.shape}")
    if not np.array_equal(m[2], [0.0, 0.0, 1.0]):
        raise SingularMatrixError("affine matrix bottom row must be [0, 0, 1]")
    if not np.all(np.isfinite(m)):
        raise SingularMatrixError("affine matrix has non-finite entries")
    det = m[0, 0] * m[1, 1] - m[0, 1] * m[1, 0]
    if abs(det) <= 1e-12:
        raise SingularMatrixError(f"affine matrix is singular (det={det:g})")
    return m


def invert_affine(matrix):
    """Closed-form inverse; exact for pure translations."""
    m = validate_affine(matrix)
    a, b, c, d = m[0, 0], m[0, 1], m[1, 0], m[1, 1]
    det = a * d - b * c
    if a == 1.0 and d == 1.0 and b == 0.0 and c == 0.0:
        ai = np.eye(2)
    else:
        ai = np.array([[d, -b], [-c, a]]) / det
    t = -(ai @ m[:2, 2])
    return np.array([[ai[0, 0], ai[0, 1], t[0]], [ai[1, 0], ai[1, 1], t[1]], [0.0, 0.0, 1.0]])


def scale_params_to_layer(params, cumulative_stride):
    """Express image-pixel translations in the pixels of a strided feature map."""
    if cumulative_stride < 1:
        raise ValueError("cumulative stride must be >= 1")
    if cumulative_stride == 1:
        return params
    return TransformParams(
        params.theta, params.scale, params.tx / cumulative_stride, params.ty / cumulative_stride
    )


def layer_matrix(params, height, width, cumulative_stride=1, order="TRS"):
    """Affine matrix of ``params`` for an ``height x width`` map at the given stride."""
    return make_affine(
        scale_params_to_layer(params, cumulative_stride), map_center(height, width), order
    )


@functools.lru_cache(maxsize=512)
def _operator_cached(key, height, width):
    return _build_operators([np.array(key).reshape(3, 3)], height, width)


def _build_operators(matrices, height, width):
    """Block-diagonal operator with one bilinear sampling block per matrix."""
    inv = np.stack([invert_affine(m) for m in matrices])[:, :, :, None]
    n = height * width
    ys, xs = np.mgrid[0:height, 0:width]
    xs = xs.ravel().astype(np.float64)
    ys = ys.ravel().astype(np.float64)
    sx = inv[:, 0, 0] * xs + inv[:, 0, 1] * ys + inv[:, 0, 2]
    sy = inv[:, 1, 0] * xs + inv[:, 1, 1] * ys + inv[:, 1, 2]
    rx, ry = np.round(sx), np.round(sy)
    sx = np.where(np.abs(sx - rx) < SNAP, rx, sx)
    sy = np.where(np.abs(sy - ry) < SNAP, ry, sy)
    x0, y0 = np.floor(sx), np.floor(sy)
    fx, fy = sx - x0, sy - y0
    base = np.broadcast_to(np.arange(len(matrices))[:, None] * n, fx.shape)
    target = base + np.arange(n)
    rows, cols, vals = [], [], []
    for dy, dx, wgt in (
        (0, 0, (1 - fx) * (1 - fy)),
        (0, 1, fx * (1 - fy)),
        (1, 0, (1 - fx) * fy),
        (1, 1, fx * fy),
    ):
        xi = x0 + dx
        yi = y0 + dy
        ok = (wgt > 0) & (xi >= 0) & (xi < width) & (yi >= 0) & (yi < height)
        rows.append(target[ok])
        cols.append(base[ok] + (yi[ok] * width + xi[ok]).astype(np.int64))
        vals.append(wgt[ok])
    size = len(matrices) * n
    op = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(size, size)
    )
    op.sum_duplicates()
    return op


def warp_operator(matrix, height, width):
    """Sparse (HW x HW) matrix taking a flattened source map to the warped map."""
    m = validate_affine(matrix)
    return _operator_cached(tuple(m.ravel().tolist()), height, width)


def _block_operator(matrices, height, width):
    if len(matrices) == 1:
        return warp_operator(matrices[0], height, width)
    return _build_operators([validate_affine(m) for m in matrices], height, width)


def _matrices_for(matrix, batch):
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim == 2:
        return [m] * batch, True
    if m.shape != (batch, 3, 3):
        raise ShapeError(f"expected {batch} matrices of shape 3x3, got {m.shape}")
    return list(m), False


def bilinear_warp(features, matrix):
    """Warp every channel of ``features`` (``(H,W,C)`` or ``(B,H,W,C)``).

    ``matrix`` is one 3x3 transform, or a ``(B,3,3)`` stack with one per
    sample. Differentiable with respect to ``features``.
    """
    x = as_tensor(features)
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4:
        raise ShapeError(f"bilinear_warp expects (B,)H,W,C features, got {x.shape}")
    B, H, W, C = xd.shape
    mats, shared = _matrices_for(matrix, B)
    if shared:
        op = warp_operator(mats[0], H, W).astype(xd.dtype)
        flat = xd.transpose(1, 2, 0, 3).reshape(H * W, B * C)
        out = (op @ flat).reshape(H, W, B, C).transpose(2, 0, 1, 3)
    else:
        op = _block_operator(mats, H, W).astype(xd.dtype)
        out = (op @ xd.reshape(B * H * W, C)).reshape(B, H, W, C)
    out = np.ascontiguousarray(out, dtype=xd.dtype)
    if squeeze:
        out = out[0]

    def back(g):
        g4 = g[None] if squeeze else g
        if shared:
            flat_g = g4.transpose(1, 2, 0, 3).reshape(H * W, B * C)
            gx = (op.T @ flat_g).reshape(H, W, B, C).transpose(2, 0, 1, 3)
        else:
            gx = (op.T @ g4.reshape(B * H * W, C)).reshape(B, H, W, C)
        gx = np.ascontiguousarray(gx, dtype=g.dtype)
        return (gx[0] if squeeze else gx,)

    return make_node(out, (x,), back, "bilinear_warp")


def warp_backward(features, matrix, upstream_grad):
    """Gradient of ``sum(bilinear_warp(features, matrix) * upstream_grad)`` w.r.t. ``features``.

    The warp is linear in the features, so this is the transpose of the
    forward operator applied to ``upstream_grad``.
    """
    f = np.asarray(features.data if isinstance(features, Tensor) else features)
    g = np.asarray(upstream_grad)
    if f.shape != g.shape:
        raise ShapeError(f"feature shape {f.shape} does not match gradient shape {g.shape}")
    squeeze = f.ndim == 3
    g4 = g[None] if squeeze else g
    B, H, W, C = g4.shape
    mats, _ = _matrices_for(matrix, B)
    op = _block_operator(mats, H, W)
    gx = (op.T @ g4.reshape(B * H * W, C)).reshape(B, H, W, C)
    return gx[0] if squeeze else gx


def apply_mask(features, mask):
    """Multiply every channel by an ``(H, W)`` mask with values in [0, 1]."""
    x = as_tensor(features)
    m = np.asarray(mask, dtype=x.dtype)
    if m.ndim != 2 or m.shape != x.shape[-3:-1]:
        raise ShapeError(f"mask shape {m.shape} does not match feature map {x.shape[-3:-1]}")
    if m.size and (m.min() < 0 or m.max() > 1):
        raise ValueError("mask values must lie in [0, 1]")
    return mul(x, Tensor(m[..., None]))
