"""The top-down feature transformer.

A :class:`Tft` is ``post(warp(pre(f), M(params)))`` where ``pre`` and ``post``
are independent :class:`AggregatedLayer` instances. Each aggregated layer is
``w0 * f + sum_i w_i * T_i(f)`` over ``N`` small convolutional stacks.

Storage layout: the first convolution of all branches reads the same input, so
its kernels are concatenated along the output axis and evaluated as one
convolution. Deeper convolutions are grouped (one group per branch). Branch
``i`` owns output channels ``[i*c, (i+1)*c)`` of every stored kernel.
"""

from dataclasses import asdict, dataclass, replace

import numpy as np

from .affine import TransformParams, bilinear_warp, layer_matrix
from .autodiff import Tensor, as_tensor, conv2d, dense, relu, weighted_group_sum
from .errors import ShapeError

SPATIAL = "spatial"
STYLE = "style"


@dataclass(frozen=True)
class TftConfig:
    """Hyperparameters of one TFT.

    Defaults are the per-layer setting used for the MNIST experiments:
    depth 2, 32 intermediate channels, 5x5 kernels and 8 branches.
    """

    channels: int
    n_branches: int = 8
    hidden: int = 32
    kernel: int = 5
    depth: int = 2
    final_relu: bool = True
    bias: bool = True
    mode: str = SPATIAL
    order: str = "TRS"
    n_styles: int = 0
    regressor_hidden: int = 32

    def __post_init__(self):
        if self.mode not in (SPATIAL, STYLE):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.depth < 1 or self.kernel < 1 or self.hidden < 1 or self.channels < 1:
            raise ValueError("depth, kernel, hidden and channels must be positive")
        if self.mode == SPATIAL and self.n_branches % 2:
            raise ValueError("spatial mode needs an even number of branches")
        if self.mode == STYLE and self.n_styles < 1:
            raise ValueError("style mode needs n_styles >= 1")


def paper_spatial(channels, **overrides):
    return replace(TftConfig(channels), **overrides)


def paper_augment(channels, **overrides):
    """Wider variant used for network-internal augmentation."""
    return replace(TftConfig(channels, n_branches=16, hidden=64), **overrides)


def paper_style(channels, n_styles, **overrides):
    return replace(TftConfig(channels, depth=5, mode=STYLE, n_styles=n_styles), **overrides)


def _uniform(rng, shape, fan_in, dtype):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


@dataclass
class TransformationFunction:
    """Standalone copy of one branch: per-layer ``(kernel, bias)`` pairs."""

    kernels: list
    biases: list
    final_relu: bool = True

    @property
    def depth(self):
        return len(self.kernels)

    def __call__(self, f):
        h = as_tensor(f)
        for i, (k, b) in enumerate(zip(self.kernels, self.biases)):
            h = conv2d(h, Tensor(k), None if b is None else Tensor(b))
            if i < self.depth - 1 or self.final_relu:
                h = relu(h)
        return h


class AggregatedLayer:
    """``w0 * f + sum_i w_i * T_i(f)`` with ``N`` convolutional branches."""

    def __init__(
        self,
        channels,
        n_branches,
        hidden,
        kernel,
        depth,
        w0=1.0,
        weights=None,
        final_relu=True,
        bias=True,
        rng=None,
        zero=False,
        dtype=np.float64,
    ):
        self.channels = channels
        self.n_branches = n_branches
        self.hidden = hidden
        self.kernel_size = kernel
        self.depth = depth
        self.final_relu = final_relu
        self.w0 = float(w0)
        if weights is None:
            half = n_branches // 2
            weights = [1.0] * half + [-1.0] * (n_branches - half)
        self.weights = np.asarray(weights, dtype=np.float64)
        if self.weights.shape != (n_branches,):
            raise ShapeError(f"expected {n_branches} branch weights, got {self.weights.shape}")
        rng = np.random.default_rng() if rng is None else rng
        self.kernels = []
        self.biases = []
        for layer in range(depth):
            cin = channels if layer == 0 else hidden
            cout = channels if layer == depth - 1 else hidden
            shape = (kernel, kernel, cin, n_branches * cout)
            if zero:
                k = np.zeros(shape, dtype=dtype)
            else:
                k = _uniform(rng, shape, kernel * kernel * cin, dtype)
            self.kernels.append(Tensor(k, requires_grad=True))
            self.biases.append(
                Tensor(np.zeros(n_branches * cout, dtype=dtype), requires_grad=True) if bias else None
            )

    def _groups(self, layer):
        return 1 if layer == 0 else self.n_branches

    def parameters(self):
        return [p for pair in zip(self.kernels, self.biases) for p in pair if p is not None]

    def named_parameters(self, prefix=""):
        out = {}
        for i, (k, b) in enumerate(zip(self.kernels, self.biases)):
            out[f"{prefix}conv{i}.kernel"] = k
            if b is not None:
                out[f"{prefix}conv{i}.bias"] = b
        return out

    def _width(self, layer):
        return self.channels if layer == self.depth - 1 else self.hidden

    def branch(self, i):
        """Copy of branch ``i`` as a :class:`TransformationFunction`."""
        kernels, biases = [], []
        for layer, (k, b) in enumerate(zip(self.kernels, self.biases)):
            c = self._width(layer)
            sl = slice(i * c, (i + 1) * c)
            kernels.append(k.data[..., sl].copy())
            biases.append(None if b is None else b.data[sl].copy())
        return TransformationFunction(kernels, biases, self.final_relu)

    def set_branch(self, i, fn):
        """Overwrite branch ``i`` with the parameters of ``fn``."""
        if fn.depth != self.depth:
            raise ShapeError(f"branch depth {fn.depth} != layer depth {self.depth}")
        for layer in range(self.depth):
            c = self._width(layer)
            sl = slice(i * c, (i + 1) * c)
            k = self.kernels[layer].data.copy()
            k[..., sl] = fn.kernels[layer]
            self.kernels[layer].data = k
            if self.biases[layer] is not None:
                b = self.biases[layer].data.copy()
                b[sl] = 0.0 if fn.biases[layer] is None else fn.biases[layer]
                self.biases[layer].data = b

    def __call__(self, f, weights=None, w0=None):
        return aggregated_apply(self, f, weights, w0)


def aggregated_apply(layer, f, weights=None, w0=None):
    """Evaluate an aggregated layer; ``weights``/``w0`` override the stored ones."""
    f = as_tensor(f)
    if f.shape[-1] != layer.channels:
        raise ShapeError(f"feature map has {f.shape[-1]} channels, layer expects {layer.channels}")
    h = f
    for i, (k, b) in enumerate(zip(layer.kernels, layer.biases)):
        h = conv2d(h, k, b, groups=layer._groups(i))
        if i < layer.depth - 1 or layer.final_relu:
            h = relu(h)
    w = layer.weights if weights is None else weights
    out = weighted_group_sum(h, w, layer.n_branches)
    w0 = layer.w0 if w0 is None else w0
    if w0 != 0:
        out = f * w0 + out
    return out


class WeightRegressor:
    """Two fully-connected layers mapping a style code to ``n_out`` branch weights."""

    def __init__(self, n_styles, hidden, n_out, rng=None, zero_final=False, dtype=np.float64):
        rng = np.random.default_rng() if rng is None else rng
        self.n_styles = n_styles
        self.n_out = n_out
        self.w1 = Tensor(_uniform(rng, (n_styles, hidden), n_styles, dtype), requires_grad=True)
        self.b1 = Tensor(np.zeros(hidden, dtype), requires_grad=True)
        final = np.zeros((hidden, n_out), dtype) if zero_final else _uniform(rng, (hidden, n_out), hidden, dtype)
        self.w2 = Tensor(final, requires_grad=True)
        self.b2 = Tensor(np.zeros(n_out, dtype), requires_grad=True)

    def parameters(self):
        return [self.w1, self.b1, self.w2, self.b2]

    def named_parameters(self, prefix=""):
        return {f"{prefix}fc0.weight": self.w1, f"{prefix}fc0.bias": self.b1,
                f"{prefix}fc1.weight": self.w2, f"{prefix}fc1.bias": self.b2}

    def __call__(self, codes):
        c = as_tensor(codes)
        return dense(relu(dense(c, self.w1, self.b1)), self.w2, self.b2)


def validate_style_code(code, n_styles):
    c = np.asarray(code, dtype=np.float64)
    if c.shape[-1] != n_styles:
        raise ShapeError(f"style code has length {c.shape[-1]}, expected {n_styles}")
    if np.any(c < 0) or not np.allclose(c.sum(axis=-1), 1.0):
        raise ValueError("style code entries must be non-negative and sum to 1")
    return c


def one_hot(index, n_styles):
    c = np.zeros(n_styles)
    c[index] = 1.0
    return c


def style_weights(reg, code):
    """Branch weights ``(pre, post)`` generated for ``code``; the residual weight is 0."""
    c = validate_style_code(code, reg.n_styles)
    w = reg(c).data
    half = reg.n_out // 2
    return w[..., :half], w[..., half:]


class Tft:
    """Aggregated layer, affine warp, aggregated layer; one instance per backbone tap."""

    def __init__(self, config, tap=1, stride=1, rng=None, zero=False, dtype=np.float64):
        self.config = config
        self.tap = int(tap)
        self.stride = int(stride)
        rng = np.random.default_rng() if rng is None else rng
        style = config.mode == STYLE
        common = dict(
            channels=config.channels,
            n_branches=config.n_branches,
            hidden=config.hidden,
            kernel=config.kernel,
            depth=config.depth,
            w0=0.0 if style else 1.0,
            final_relu=config.final_relu,
            bias=config.bias,
            zero=zero,
            dtype=dtype,
        )
        self.pre = AggregatedLayer(rng=rng, **common)
        self.post = AggregatedLayer(rng=rng, **common)
        self.regressor = None
        if style:
            self.regressor = WeightRegressor(
                config.n_styles, config.regressor_hidden, 2 * config.n_branches, rng=rng,
                zero_final=zero, dtype=dtype,
            )

    @property
    def mode(self):
        return self.config.mode

    def parameters(self):
        params = self.pre.parameters() + self.post.parameters()
        if self.regressor is not None:
            params += self.regressor.parameters()
        return params

    def kernel_parameters(self):
        return [k for layer in (self.pre, self.post) for k in layer.kernels]

    def named_parameters(self):
        out = {}
        out.update(self.pre.named_parameters("pre."))
        out.update(self.post.named_parameters("post."))
        if self.regressor is not None:
            out.update(self.regressor.named_parameters("regressor."))
        return out

    def __call__(self, f, control=None):
        if self.mode == STYLE:
            return style_forward(self, f, control)
        return tft_forward(self, f, control)

    # -- persistence -------------------------------------------------------

    def state_dict(self):
        cfg = self.config
        meta = np.array(
            [cfg.channels, cfg.n_branches, cfg.hidden, cfg.kernel, cfg.depth, int(cfg.final_relu),
             int(cfg.bias), int(cfg.mode == STYLE), cfg.n_styles, cfg.regressor_hidden,
             self.tap, self.stride, "TRS SRT RTS STR TSR RST".split().index(cfg.order)],
            dtype=np.float64,
        )
        state = {"tft.config": meta, "pre.w": self.pre.weights, "post.w": self.post.weights,
                 "pre.w0": np.array([self.pre.w0]), "post.w0": np.array([self.post.w0])}
        state.update({k: v.data for k, v in self.named_parameters().items()})
        return state

    @classmethod
    def from_state_dict(cls, state, dtype=np.float64):
        m = [int(round(v)) for v in np.asarray(state["tft.config"])]
        cfg = TftConfig(
            channels=m[0], n_branches=m[1], hidden=m[2], kernel=m[3], depth=m[4],
            final_relu=bool(m[5]), bias=bool(m[6]), mode=STYLE if m[7] else SPATIAL,
            n_styles=m[8], regressor_hidden=m[9], order="TRS SRT RTS STR TSR RST".split()[m[12]],
        )
        tft = cls(cfg, tap=m[10], stride=m[11], zero=True, dtype=dtype)
        for layer in ("pre", "post"):
            agg = getattr(tft, layer)
            agg.weights = np.asarray(state[f"{layer}.w"], dtype=np.float64)
            agg.w0 = float(np.asarray(state[f"{layer}.w0"])[0])
        for name, p in tft.named_parameters().items():
            arr = np.asarray(state[name], dtype=dtype)
            if arr.shape != p.shape:
                raise ShapeError(f"{name}: stored shape {arr.shape} != expected {p.shape}")
            p.data = arr
        return tft

    def describe(self):
        d = asdict(self.config)
        d.update(tap=self.tap, stride=self.stride)
        return d


def _as_params_list(control, batch):
    if control is None:
        return [TransformParams()] * batch
    if isinstance(control, TransformParams):
        return [control] * batch
    params = list(control)
    if len(params) != batch:
        raise ShapeError(f"{len(params)} transform parameter sets for a batch of {batch}")
    return params


def tft_matrices(tft, control, batch, height, width):
    """One affine matrix, or a (B, 3, 3) stack when the batch mixes controls."""
    if control is None or isinstance(control, TransformParams):
        p = control or TransformParams()
        return layer_matrix(p, height, width, tft.stride, tft.config.order)
    params = _as_params_list(control, batch)
    return np.stack([layer_matrix(p, height, width, tft.stride, tft.config.order) for p in params])


def tft_forward(tft, f, params=None):
    """Spatial-mode forward pass for ``f`` of shape (H, W, C) or (B, H, W, C).

    ``params`` is one :class:`TransformParams` for the whole batch or a
    sequence with one entry per sample. Translations are given in input-image
    pixels and divided by the TFT's cumulative stride.
    """
    f = as_tensor(f)
    if f.shape[-1] != tft.config.channels:
        raise ShapeError(f"feature map has {f.shape[-1]} channels, TFT expects {tft.config.channels}")
    batch = 1 if f.ndim == 3 else f.shape[0]
    H, W = f.shape[-3], f.shape[-2]
    if f.ndim == 3 and not (params is None or isinstance(params, TransformParams)):
        (params,) = list(params)
    h = tft.pre(f)
    h = bilinear_warp(h, tft_matrices(tft, params, batch, H, W))
    return tft.post(h)


def style_forward(tft, f, codes):
    """Style-mode forward pass: regressed branch weights, no residual, identity warp."""
    if tft.regressor is None:
        raise ValueError("TFT was not built in style mode")
    f = as_tensor(f)
    c = validate_style_code(codes, tft.config.n_styles)
    n = tft.config.n_branches
    w = tft.regressor(c)
    if f.ndim == 4:
        if c.ndim == 1:
            c = np.broadcast_to(c, (f.shape[0], c.shape[0]))
            w = tft.regressor(c)
        w_pre, w_post = w[:, :n], w[:, n:]
    else:
        if c.ndim != 1:
            raise ShapeError("a single feature map takes a single style code")
        w_pre, w_post = w[:n], w[n:]
    h = tft.pre(f, weights=w_pre, w0=0.0)
    H, W = f.shape[-3], f.shape[-2]
    h = bilinear_warp(h, layer_matrix(TransformParams(), H, W))
    return tft.post(h, weights=w_post, w0=0.0)
