"""Dataset ingestion, image preparation, control sampling and training-tuple harvest."""

import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .affine import TransformParams, bilinear_warp, layer_matrix
from .autodiff import no_grad
from .checkpoint import load_tensors, save_tensors
from .errors import BadMagicError, CountMismatchError, FormatError, ShapeError, TruncationError

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801


@dataclass
class ImageSample:
    pixels: np.ndarray
    label: int = None

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.size and (self.pixels.min() < 0 or self.pixels.max() > 1):
            raise ValueError("pixel intensities must lie in [0, 1]")


# ------------------------------------------------------------------ IDX


def _read_maybe_gzip(path):
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        try:
            raw = gzip.decompress(raw)
        except (EOFError, OSError) as exc:
            raise TruncationError(f"{path}: compressed stream is truncated or corrupt") from exc
    return raw


def _idx_payload(raw, magic, ndims, path):
    header = 4 + 4 * ndims
    if len(raw) < header:
        raise TruncationError(f"{path}: file too short for an IDX header")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise BadMagicError(f"{path}: magic 0x{found:08x}, expected 0x{magic:08x}")
    dims = struct.unpack(f">{ndims}I", raw[4:header])
    n = int(np.prod(dims, dtype=np.int64))
    if len(raw) - header < n:
        raise TruncationError(f"{path}: expected {n} data bytes, found {len(raw) - header}")
    return dims, np.frombuffer(raw, dtype=np.uint8, count=n, offset=header)


def read_idx_arrays(images_path, labels_path):
    """Images scaled to [0, 1] as (N, rows, cols) and labels as int64."""
    dims, px = _idx_payload(_read_maybe_gzip(images_path), IDX_IMAGES, 3, images_path)
    (nl,), lab = _idx_payload(_read_maybe_gzip(labels_path), IDX_LABELS, 1, labels_path)
    if dims[0] != nl:
        raise CountMismatchError(f"{dims[0]} images but {nl} labels")
    return px.reshape(dims).astype(np.float64) / 255.0, lab.astype(np.int64)


def load_idx(images_path, labels_path):
    """Read an IDX image/label pair (optionally gzip-compressed) into samples."""
    x, y = read_idx_arrays(images_path, labels_path)
    return [ImageSample(img, int(lbl)) for img, lbl in zip(x, y)]


def write_idx(images, labels, images_path, labels_path):
    """Write uint8-quantized images and labels; ``.gz`` suffixes are compressed."""
    px = np.clip(np.floor(np.asarray(images) * 255.0 + 0.5), 0, 255).astype(np.uint8)
    lab = np.asarray(labels, dtype=np.uint8)
    for path, blob in (
        (images_path, struct.pack(">IIII", IDX_IMAGES, *px.shape) + px.tobytes()),
        (labels_path, struct.pack(">II", IDX_LABELS, len(lab)) + lab.tobytes()),
    ):
        if str(path).endswith(".gz"):
            blob = gzip.compress(blob, mtime=0)
        Path(path).write_bytes(blob)


# ------------------------------------------------------------------ PGM


def quantize(image):
    """[0, 1] -> bytes, rounding half up."""
    x = np.asarray(image, dtype=np.float64)
    if x.size and (x.min() < 0 or x.max() > 1):
        raise ValueError("PGM pixels must lie in [0, 1]")
    return np.floor(x * 255.0 + 0.5).astype(np.uint8)


def write_pgm(image, path):
    px = quantize(image)
    if px.ndim != 2:
        raise ShapeError(f"PGM images are 2-d, got shape {px.shape}")
    h, w = px.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + px.tobytes())


def _pgm_tokens(raw):
    """Yield (token, end offset) for the four header fields, skipping comments."""
    pos = 0
    found = []
    while len(found) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos >= len(raw):
            raise FormatError("PGM header ended early")
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        found.append(raw[start:pos])
    return found, pos + 1


def read_pgm(path):
    """Binary PGM (P5, maxval <= 255) as floats in [0, 1]."""
    raw = Path(path).read_bytes()
    (magic, w, h, maxval), offset = _pgm_tokens(raw)
    if magic != b"P5":
        raise FormatError(f"{path}: not a binary PGM (magic {magic!r})")
    try:
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError as exc:
        raise FormatError(f"{path}: malformed PGM header") from exc
    if w <= 0 or h <= 0 or not 0 < maxval <= 255:
        raise FormatError(f"{path}: unsupported PGM geometry {w}x{h} maxval {maxval}")
    if len(raw) - offset < w * h:
        raise TruncationError(f"{path}: PGM payload truncated")
    px = np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=offset)
    return px.reshape(h, w).astype(np.float64) / maxval


# ------------------------------------------------------------------ images


def pad_to(image, target=44):
    """Zero-pad a square-or-rectangular image to ``target x target``, centered."""
    x = np.asarray(image, dtype=np.float64)
    h, w = x.shape
    if target < h or target < w:
        raise ValueError(f"cannot pad {h}x{w} to smaller size {target}")
    top, left = (target - h) // 2, (target - w) // 2
    out = np.zeros((target, target), dtype=np.float64)
    out[top : top + h, left : left + w] = x
    return out


def max_norm(image):
    """Scale so the brightest pixel is 1; an all-zero image is returned unchanged."""
    x = np.asarray(image, dtype=np.float64)
    peak = x.max() if x.size else 0.0
    return x / peak if peak > 0 else x.copy()


def warp_image(image, params, order="TRS"):
    """Ground-truth transformed image: the feature-map warp applied at pixel level, clamped to [0, 1]."""
    x = np.asarray(image, dtype=np.float64)
    single = x.ndim == 2
    xs = x[None] if single else x
    B, H, W = xs.shape
    if isinstance(params, TransformParams):
        m = layer_matrix(params, H, W, 1, order)
    else:
        params = list(params)
        if len(params) != B:
            raise ShapeError(f"{len(params)} parameter sets for {B} images")
        m = np.stack([layer_matrix(p, H, W, 1, order) for p in params])
    with no_grad():
        out = bilinear_warp(xs[..., None], m).data[..., 0]
    out = np.clip(out, 0.0, 1.0)
    return out[0] if single else out


# ------------------------------------------------------------------ controls


def _grid(lo, hi, step):
    n = int(round((hi - lo) / step))
    return tuple(float(lo + i * step) for i in range(n + 1))


@dataclass(frozen=True)
class ThetaRanges:
    """Sampling domain for transform parameters.

    ``mode="grid"`` draws each component uniformly from a finite set;
    ``mode="box"`` draws each component uniformly from a closed interval
    ``(lo, hi)``.
    """

    mode: str = "grid"
    rotations: tuple = (0.0,)
    scales: tuple = (1.0,)
    tx: tuple = (0.0,)
    ty: tuple = (0.0,)

    def __post_init__(self):
        if self.mode not in ("grid", "box"):
            raise ValueError(f"unknown sampling mode {self.mode!r}")
        for name in ("rotations", "scales", "tx", "ty"):
            vals = getattr(self, name)
            if len(vals) == 0:
                raise ValueError(f"{name} range is empty")
            if self.mode == "box" and (len(vals) != 2 or vals[0] > vals[1]):
                raise ValueError(f"{name} must be an interval (lo, hi) in box mode")
        if min(self.scales) <= 0:
            raise ValueError("scales must be positive")

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def mnist_grid(cls):
        """225 integer translations in [-7, 7]^2, 13 rotations in 5 degree steps up to 30, 3 scales."""
        shifts = _grid(-7, 7, 1)
        return cls("grid", _grid(-30, 30, 5), (0.9, 1.0, 1.1), shifts, shifts)

    @classmethod
    def augment_box(cls):
        return cls("box", (-30.0, 30.0), (0.8, 1.2), (-20.0, 20.0), (-20.0, 20.0))

    @classmethod
    def single(cls, params):
        return cls("grid", (params.theta,), (params.scale,), (params.tx,), (params.ty,))

    def contains(self, p, tol=1e-9):
        pairs = ((p.theta, self.rotations), (p.scale, self.scales), (p.tx, self.tx), (p.ty, self.ty))
        if self.mode == "grid":
            return all(any(abs(v - c) <= tol for c in vals) for v, vals in pairs)
        return all(vals[0] - tol <= v <= vals[1] + tol for v, vals in pairs)


def sample_theta(ranges, rng):
    if ranges.mode == "grid":
        def pick(vals):
            return vals[int(rng.integers(len(vals)))] if len(vals) > 1 else vals[0]
    else:
        def pick(vals):
            return float(rng.uniform(vals[0], vals[1])) if vals[1] > vals[0] else vals[0]
    theta = pick(ranges.rotations)
    scale = pick(ranges.scales)
    tx = pick(ranges.tx)
    ty = pick(ranges.ty)
    return TransformParams(theta, scale, tx, ty)


# ------------------------------------------------------------------ tuples


@dataclass
class TrainingTuple:
    f_ori: dict
    f_theta: dict
    params: TransformParams
    image_index: int = field(default=-1)


def harvest(bb, images, params, taps=(1,), dtype=np.float64):
    """Tap features of ``images`` and of their warped copies, batched."""
    x = np.asarray(images, dtype=np.float64)
    xt = warp_image(x, params)
    upto = max(taps)
    with no_grad():
        fo = bb.taps(x, upto)
        ft = bb.taps(xt, upto)
    return ({k: fo[k].data.astype(dtype, copy=False) for k in taps},
            {k: ft[k].data.astype(dtype, copy=False) for k in taps})


def make_tuples(bb, images, count, ranges, rng, taps=(1,), batch_size=64, dtype=np.float64):
    """Harvest ``count`` (f_ori, f_theta, params) triples.

    Draw ``i`` uses image ``i mod len(images)`` and a fresh control from
    ``ranges``.
    """
    images = np.asarray(images, dtype=np.float64)
    params = [sample_theta(ranges, rng) for _ in range(count)]
    out = []
    for start in range(0, count, batch_size):
        idx = np.arange(start, min(start + batch_size, count)) % len(images)
        ps = params[start : start + len(idx)]
        fo, ft = harvest(bb, images[idx], ps, taps, dtype)
        for j, (i, p) in enumerate(zip(idx, ps)):
            out.append(TrainingTuple({k: fo[k][j] for k in taps}, {k: ft[k][j] for k in taps}, p, int(i)))
    return out


class TupleBatcher:
    """Minibatches drawn uniformly with replacement from a materialized tuple list."""

    def __init__(self, tuples, tap):
        if not tuples:
            raise ValueError("empty tuple set")
        if tap not in tuples[0].f_ori:
            raise ValueError(f"tuples carry taps {sorted(tuples[0].f_ori)}, not tap {tap}")
        self.tap = tap
        self.f_ori = np.stack([t.f_ori[tap] for t in tuples])
        self.f_theta = np.stack([t.f_theta[tap] for t in tuples])
        self.params = [t.params for t in tuples]

    def __len__(self):
        return len(self.params)

    def batch(self, rng, size):
        idx = rng.integers(len(self.params), size=size)
        return self.f_ori[idx], self.f_theta[idx], [self.params[i] for i in idx]


class OnlineTuples:
    """Harvest a fresh minibatch of tuples from ``images`` on every call.

    The untransformed features do not depend on the control, so with
    ``cache_ori`` they are computed once for all images up front.
    """

    def __init__(self, bb, images, ranges, tap, dtype=np.float64, cache_ori=True):
        self.bb = bb
        self.dtype = dtype
        self.images = np.asarray(images, dtype=np.float64)
        self.ranges = ranges
        self.tap = tap
        if len(self.images) == 0:
            raise ValueError("empty image set")
        self.f_ori = None
        if cache_ori:
            with no_grad():
                self.f_ori = np.concatenate([bb.taps(self.images[i : i + 64], tap)[tap].data.astype(dtype)
                                             for i in range(0, len(self.images), 64)])

    def batch(self, rng, size):
        idx = rng.integers(len(self.images), size=size)
        params = [sample_theta(self.ranges, rng) for _ in range(size)]
        if self.f_ori is None:
            fo, ft = harvest(self.bb, self.images[idx], params, (self.tap,), self.dtype)
            return fo[self.tap], ft[self.tap], params
        with no_grad():
            ft = self.bb.taps(warp_image(self.images[idx], params), self.tap)[self.tap].data
        return self.f_ori[idx], ft.astype(self.dtype, copy=False), params


def save_tuples(tuples, path):
    """Store tuples in the checkpoint container."""
    state = {"tuples.count": np.array([len(tuples)], dtype=np.float64)}
    for i, t in enumerate(tuples):
        state[f"t{i}.params"] = t.params.as_array()
        for k, v in t.f_ori.items():
            state[f"t{i}.ori.{k}"] = v
            state[f"t{i}.theta.{k}"] = t.f_theta[k]
    save_tensors(state, path)


def load_tuples(path):
    state = load_tensors(path)
    n = int(state["tuples.count"][0])
    out = []
    for i in range(n):
        # controls come back from 32-bit storage; snap to 6 decimals
        p = TransformParams(*(round(v, 6) for v in state[f"t{i}.params"].tolist()))
        taps = sorted(int(k.rsplit(".", 1)[1]) for k in state if k.startswith(f"t{i}.ori."))
        out.append(TrainingTuple({k: state[f"t{i}.ori.{k}"] for k in taps},
                                 {k: state[f"t{i}.theta.{k}"] for k in taps}, p))
    return out
