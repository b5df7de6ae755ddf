"""Training, image generation by feature inversion, flow fields, augmentation and metrics."""

import math
from dataclasses import dataclass, field

import numpy as np

from .affine import TransformParams
from .autodiff import Tensor, as_tensor, backward, conv2d, mean, no_grad, softmax_cross_entropy, square, sub, tsum
from .core import STYLE, one_hot, style_forward
from .data import TupleBatcher, sample_theta
from .errors import NoMassError, NumericError, ShapeError
from .optim import Adam, l2_penalty

# ---------------------------------------------------------------- losses


def feature_loss(predicted, target, reduction="mean"):
    """Squared feature error: element mean (default) or plain sum."""
    p, t = as_tensor(predicted), as_tensor(target)
    if p.shape != t.shape:
        raise ShapeError(f"predicted shape {p.shape} != target shape {t.shape}")
    d = square(sub(p, t))
    if reduction == "mean":
        return mean(d)
    if reduction == "sum":
        return tsum(d)
    raise ValueError(f"unknown reduction {reduction!r}")


def tv_regularizer(image):
    """Sum of squared forward differences along rows and columns of (H, W) or (B, H, W)."""
    x = as_tensor(image)
    if x.shape[-1] < 2 or x.shape[-2] < 2:
        raise ShapeError("total variation needs at least 2x2 pixels")
    dv = sub(x[..., 1:, :], x[..., :-1, :])
    dh = sub(x[..., :, 1:], x[..., :, :-1])
    return tsum(square(dv)) + tsum(square(dh))


def mspe(a, b):
    """Mean squared pixel error between two images in [0, 1]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


# ---------------------------------------------------------------- TFT training


@dataclass
class TrainConfig:
    """Minibatch ADAM settings; defaults are the full-scale MNIST values."""

    steps: int = 200_000
    batch_size: int = 128
    lr: float = 1e-4
    l2: float = 1e-4
    seed: int = 0
    tap: int = 1
    log_every: int = 100
    reduction: str = "mean"

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1 or self.lr <= 0 or self.l2 < 0:
            raise ValueError(f"invalid training configuration {self}")


def _source_for(tuples, tap):
    if hasattr(tuples, "batch"):
        if getattr(tuples, "tap", tap) != tap:
            raise ValueError(f"tuple source targets tap {tuples.tap}, TFT is attached to tap {tap}")
        return tuples
    return TupleBatcher(list(tuples), tap)


def evaluate_tft(tft, f_ori, f_theta, params, batch_size=64, reduction="mean"):
    """Mean feature loss over a held-out set (one value per element, averaged over samples)."""
    f_ori = np.asarray(f_ori)
    total = 0.0
    with no_grad():
        for i in range(0, len(f_ori), batch_size):
            sl = slice(i, i + batch_size)
            pred = tft(Tensor(f_ori[sl]), list(params[sl]))
            loss = feature_loss(pred, Tensor(np.asarray(f_theta[sl])), reduction)
            total += float(loss.data) * (len(pred.data) if reduction == "mean" else 1)
    return total / len(f_ori) if reduction == "mean" else total


def train_tft(tft, tuples, cfg, log=None):
    """Fit the branch kernels of a spatial-mode TFT; branch weights stay fixed.

    ``tuples`` is a list of :class:`~tft.data.TrainingTuple` or any object
    with a ``batch(rng, size)`` method. Returns ``(tft, history)`` where
    history holds ``(step, minibatch feature loss)`` every ``cfg.log_every``
    steps, starting at step 0.
    """
    if not hasattr(tuples, "batch") and len(tuples) == 0:
        raise ValueError("empty tuple set")
    if cfg.tap != tft.tap:
        raise ValueError(f"config targets tap {cfg.tap}, TFT is attached to tap {tft.tap}")
    source = _source_for(tuples, tft.tap)
    rng = np.random.default_rng(cfg.seed)
    fixed = [(layer.w0, layer.weights.copy()) for layer in (tft.pre, tft.post)]
    opt = Adam(tft.parameters(), lr=cfg.lr)
    dtype = tft.pre.kernels[0].dtype
    history = []
    for step in range(cfg.steps):
        fo, ft, ps = source.batch(rng, cfg.batch_size)
        pred = tft(Tensor(fo.astype(dtype, copy=False)), ps)
        data_term = feature_loss(pred, Tensor(ft.astype(dtype, copy=False)), cfg.reduction)
        loss = data_term + l2_penalty(tft.kernel_parameters(), cfg.l2) if cfg.l2 else data_term
        value = float(data_term.data)
        if not math.isfinite(value):
            raise NumericError(f"training loss became non-finite at step {step}", iteration=step)
        opt.zero_grad()
        backward(loss)
        opt.step()
        if step % cfg.log_every == 0:
            history.append((step, value))
            if log is not None:
                log(f"step {step} loss {value:.6g}")
    for layer, (w0, w) in zip((tft.pre, tft.post), fixed):
        assert layer.w0 == w0 and np.array_equal(layer.weights, w), "branch weights changed"
    return tft, history


# ---------------------------------------------------------------- inversion


@dataclass
class InversionConfig:
    """Feature-inversion settings.

    ``beta=None`` picks the TV weight so that its term is 1% of the initial
    feature loss. Steps move the image along the normalized negative
    gradient by ``step_size`` intensity units at most; a step that would
    raise the loss is halved and retried, so the loss never increases.
    """

    alphas: dict = field(default_factory=lambda: {1: 1.0})
    beta: float = None
    iterations: int = 300
    step_size: float = 0.05
    max_step: float = 0.2
    growth: float = 1.25
    min_step: float = 1e-6
    init: str = "source"
    seed: int = 0
    reduction: str = "mean"

    def __post_init__(self):
        if not self.alphas or any(a < 0 for a in self.alphas.values()) or max(self.alphas.values()) <= 0:
            raise ValueError("need at least one positive layer weight and none negative")
        if self.beta is not None and self.beta < 0:
            raise ValueError("beta must be non-negative")
        if self.init not in ("source", "noise"):
            raise ValueError(f"unknown init {self.init!r}")


@dataclass
class InversionResult:
    image: np.ndarray
    loss: float
    history: list
    beta: float


def inversion_targets(bb, tfts, source, params, taps):
    with no_grad():
        feats = bb.taps(np.asarray(source, dtype=np.float64), max(taps))
        return {k: tfts[k](feats[k], params).data for k in taps}


def invert_features(bb, tfts, source, params, cfg):
    """Search for an image whose backbone features match the TFT-transformed source features.

    ``tfts`` maps tap ids to TFTs; only taps with a positive weight in
    ``cfg.alphas`` are used. Pixels are clamped to [0, 1] after every step.
    """
    taps = sorted(k for k, a in cfg.alphas.items() if a > 0)
    missing = [k for k in taps if k not in tfts]
    if missing:
        raise ValueError(f"no TFT for taps {missing}")
    source = np.asarray(source, dtype=np.float64)
    targets = inversion_targets(bb, tfts, source, params, taps)
    if cfg.init == "source":
        x = source.copy()
    else:
        x = np.random.default_rng(cfg.seed).uniform(0.0, 1.0, size=source.shape)

    def feature_term(img):
        feats = bb.taps(img, max(taps))
        total = None
        for k in taps:
            term = feature_loss(feats[k], Tensor(targets[k]), cfg.reduction) * cfg.alphas[k]
            total = term if total is None else total + term
        return total

    beta = cfg.beta
    if beta is None:
        with no_grad():
            f0 = float(feature_term(Tensor(x)).data)
            r0 = float(tv_regularizer(Tensor(x)).data)
        beta = 0.01 * f0 / r0 if f0 > 0 and r0 > 0 else 0.0

    def objective(img, grad=False):
        t = Tensor(img, requires_grad=grad)
        loss = feature_term(t)
        if beta:
            loss = loss + tv_regularizer(t) * beta
        if not grad:
            return float(loss.data), None
        (g,) = backward(loss, wrt=[t])
        return float(loss.data), g

    with no_grad():
        current, _ = objective(x)
    history = [current]
    step = cfg.step_size
    for it in range(cfg.iterations):
        if not math.isfinite(current):
            raise NumericError(f"inversion loss became non-finite at iteration {it}", iteration=it)
        value, g = objective(x, grad=True)
        peak = np.abs(g).max()
        if peak == 0:
            break
        direction = g / peak
        accepted = False
        while step >= cfg.min_step:
            cand = np.clip(x - step * direction, 0.0, 1.0)
            with no_grad():
                trial, _ = objective(cand)
            if not math.isfinite(trial):
                raise NumericError(f"inversion loss became non-finite at iteration {it}", iteration=it)
            if trial <= current:
                x, current = cand, trial
                accepted = True
                step = min(step * cfg.growth, cfg.max_step)
                break
            step *= 0.5
        history.append(current)
        if not accepted:
            break
    return InversionResult(x, current, history, beta)


# ---------------------------------------------------------------- flow fields


@dataclass
class FlowField:
    """Flow vectors in feature-map pixels; ``valid[i]`` is False where the probe produced no mass."""

    starts: np.ndarray
    ends: np.ndarray
    valid: np.ndarray
    spacing: int
    shape: tuple

    def __len__(self):
        return len(self.starts)

    @property
    def vectors(self):
        return self.ends - self.starts


def center_of_mass(fmap):
    """Intensity-weighted mean ``(x, y)`` using absolute values as mass."""
    m = np.abs(np.asarray(fmap, dtype=np.float64))
    total = m.sum()
    if not total > 0:
        raise NoMassError("no mass: the map is zero everywhere")
    ys, xs = np.indices(m.shape)
    return float((m * xs).sum() / total), float((m * ys).sum() / total)


def grid_points(spacing, height, width):
    """Evenly spaced ``(x, y)`` start points, centered in the map."""
    if spacing < 1:
        raise ValueError("grid spacing must be >= 1")
    xs = np.arange((width - 1) % spacing // 2, width, spacing)
    ys = np.arange((height - 1) % spacing // 2, height, spacing)
    return np.array([(x, y) for y in ys for x in xs], dtype=np.float64)


def flow_field(tft, params, spacing, height, width, probe=1.0, batch_size=64):
    """Track one-hot probes through ``tft``.

    Each probe is ``probe`` at one grid point and 0 elsewhere, broadcast to
    every channel. The end point is the center of mass of the channel-mean
    response after subtracting the response to an all-zero map.
    """
    starts = grid_points(spacing, height, width)
    C = tft.config.channels
    dtype = tft.pre.kernels[0].dtype
    with no_grad():
        base = tft(Tensor(np.zeros((1, height, width, C), dtype)), [params]).data[0].mean(axis=-1)
        responses = []
        for i in range(0, len(starts), batch_size):
            chunk = starts[i : i + batch_size]
            maps = np.zeros((len(chunk), height, width, C), dtype)
            for j, (x, y) in enumerate(chunk):
                maps[j, int(y), int(x), :] = probe
            out = tft(Tensor(maps), [params] * len(chunk)).data.mean(axis=-1)
            responses.extend(out - base)
    ends = starts.copy()
    valid = np.zeros(len(starts), dtype=bool)
    for i, r in enumerate(responses):
        try:
            ends[i] = center_of_mass(r)
            valid[i] = True
        except NoMassError:
            pass
    return FlowField(starts, ends, valid, spacing, (height, width))


def affine_displacement(points, matrix):
    """Where ``matrix`` sends each ``(x, y)`` point."""
    p = np.column_stack([points, np.ones(len(points))])
    return (p @ np.asarray(matrix).T)[:, :2]


# ---------------------------------------------------------------- augmentation


def _check_tap(bb, tft):
    tap = tft.tap
    if tap < 1 or tap > len(bb.channels):
        raise ValueError(f"backbone has no tap {tap}")
    if tft.config.channels != bb.tap_channels(tap) or tft.stride != bb.stride(tap):
        raise ValueError(
            f"TFT expects {tft.config.channels} channels at stride {tft.stride}, backbone tap {tap} "
            f"has {bb.tap_channels(tap)} at stride {bb.stride(tap)}"
        )


def internal_augment_finetune(bb, tft, images, labels, ranges, epochs, lr=1e-4, batch_size=32, seed=0,
                              tap=None, p_augment=1.0, freeze_upstream=False, log=None):
    """Fine-tune ``bb`` with a frozen TFT inserted at its tap.

    For each minibatch every sample receives a control drawn from ``ranges``
    with probability ``p_augment`` (identity otherwise); the TFT transforms
    the tap features and the forward pass continues from there. With
    ``tft=None`` this is plain fine-tuning at ``tap``, consuming the same
    random streams for batch order. Returns ``(bb, per-epoch mean losses)``.
    """
    if tft is not None:
        _check_tap(bb, tft)
        tap = tft.tap
    elif tap is None:
        raise ValueError("plain fine-tuning needs an explicit tap")
    order_seq, aug_seq = np.random.SeedSequence(seed).spawn(2)
    order_rng, aug_rng = np.random.default_rng(order_seq), np.random.default_rng(aug_seq)
    x = np.asarray(images, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    blocks = [b for b in range(tap + 1, len(bb.channels) + 1)] + ["fc"] if freeze_upstream else None
    opt = Adam(bb.parameters(blocks), lr=lr)
    frozen = tft.parameters() if tft is not None else []
    saved = [p.requires_grad for p in frozen]
    for p in frozen:
        p.requires_grad = False
    history = []
    try:
        for epoch in range(epochs):
            perm = order_rng.permutation(len(x))
            losses = []
            for i in range(0, len(x), batch_size):
                idx = perm[i : i + batch_size]
                if freeze_upstream:
                    with no_grad():
                        feats = Tensor(bb.taps(x[idx], tap)[tap].data)
                else:
                    feats = bb.taps(x[idx], tap)[tap]
                if tft is not None:
                    ps = [
                        sample_theta(ranges, aug_rng) if aug_rng.random() < p_augment else TransformParams()
                        for _ in idx
                    ]
                    feats = tft(feats, ps)
                loss = softmax_cross_entropy(bb.head(tap, feats), y[idx])
                opt.zero_grad()
                backward(loss)
                opt.step()
                losses.append(float(loss.data))
            history.append(float(np.mean(losses)))
            if log is not None:
                log(f"epoch {epoch + 1}/{epochs} loss {history[-1]:.4f}")
    finally:
        for p, r in zip(frozen, saved):
            p.requires_grad = r
    return bb, history


# ---------------------------------------------------------------- style


def make_style_filters(n_styles, channels, rng, kernel=3):
    """Random per-channel (depthwise) linear filters, one bank per style."""
    return [rng.normal(0.0, 1.0 / kernel, size=(kernel, kernel, 1, channels)) for _ in range(n_styles)]


def apply_style(features, bank):
    """Depthwise filter ``features`` (``(..., H, W, C)``) with one style bank."""
    f = np.asarray(features)
    with no_grad():
        out = conv2d(Tensor(f), Tensor(np.asarray(bank, dtype=f.dtype)), groups=f.shape[-1])
    return out.data


@dataclass
class StyleConfig:
    steps: int = 3000
    batch_size: int = 16
    lr: float = 1e-3
    seed: int = 0
    log_every: int = 100


def style_eval(tft, features, banks, batch_size=64):
    """Mean feature loss of each style on ``features``."""
    S = len(banks)
    out = []
    with no_grad():
        for s in range(S):
            code = one_hot(s, S)
            total = 0.0
            for i in range(0, len(features), batch_size):
                f = np.asarray(features[i : i + batch_size])
                pred = style_forward(tft, Tensor(f), code)
                total += float(feature_loss(pred, Tensor(apply_style(f, banks[s]))).data) * len(f)
            out.append(total / len(features))
    return out


def train_style(tft, features, banks, cfg, log=None):
    """Jointly fit the branch stacks and the weight regressor to per-style targets.

    Returns ``(tft, history)`` with ``(step, minibatch loss)`` records.
    """
    if tft.mode != STYLE:
        raise ValueError("train_style needs a style-mode TFT")
    features = np.asarray(features)
    S = len(banks)
    if S != tft.config.n_styles:
        raise ShapeError(f"{S} filter banks for a TFT with {tft.config.n_styles} styles")
    rng = np.random.default_rng(cfg.seed)
    dtype = tft.pre.kernels[0].dtype
    targets = [apply_style(features, b).astype(dtype) for b in banks]
    opt = Adam(tft.parameters(), lr=cfg.lr)
    eye = np.eye(S)
    history = []
    for step in range(cfg.steps):
        idx = rng.integers(len(features), size=cfg.batch_size)
        sty = rng.integers(S, size=cfg.batch_size)
        f = features[idx].astype(dtype, copy=False)
        tgt = np.stack([targets[s][i] for i, s in zip(idx, sty)])
        pred = style_forward(tft, Tensor(f), eye[sty])
        loss = feature_loss(pred, Tensor(tgt))
        value = float(loss.data)
        if not math.isfinite(value):
            raise NumericError(f"style loss became non-finite at step {step}", iteration=step)
        opt.zero_grad()
        backward(loss)
        opt.step()
        if step % cfg.log_every == 0:
            history.append((step, value))
            if log is not None:
                log(f"step {step} loss {value:.6g}")
    return tft, history
