"""The frozen feature-producing CNN: three conv+ReLU+maxpool blocks and two dense layers.

Feature taps sit after each block's ReLU and before its pooling, so tap ``k``
has cumulative stride ``2 ** (k - 1)``; the stride after block ``k``'s pool is
``2 ** k``.
"""

import numpy as np

from .autodiff import Tensor, as_tensor, conv2d, dense, flatten, maxpool2, no_grad, relu, softmax_cross_entropy
from .errors import ShapeError
from .optim import Adam

TAPS = (1, 2, 3)


def _pooled(n, times):
    for _ in range(times):
        n = -(-n // 2)
    return n


class Backbone:
    """Small MNIST-style classifier with channel plan ``channels`` and 5x5 kernels."""

    def __init__(self, channels=(16, 32, 64), kernel=5, hidden=128, n_classes=10, input_size=44,
                 rng=None, dtype=np.float64):
        rng = np.random.default_rng() if rng is None else rng
        self.channels = tuple(channels)
        self.kernel = kernel
        self.hidden = hidden
        self.n_classes = n_classes
        self.input_size = input_size
        self.conv_k, self.conv_b = [], []
        cin = 1
        for c in self.channels:
            fan_in = kernel * kernel * cin
            bound = np.sqrt(6.0 / fan_in)
            self.conv_k.append(Tensor(rng.uniform(-bound, bound, (kernel, kernel, cin, c)).astype(dtype), requires_grad=True))
            self.conv_b.append(Tensor(np.zeros(c, dtype), requires_grad=True))
            cin = c
        side = _pooled(input_size, len(self.channels))
        flat = side * side * self.channels[-1]
        self.fc_w, self.fc_b = [], []
        for n_in, n_out in ((flat, hidden), (hidden, n_classes)):
            bound = np.sqrt(6.0 / n_in)
            self.fc_w.append(Tensor(rng.uniform(-bound, bound, (n_in, n_out)).astype(dtype), requires_grad=True))
            self.fc_b.append(Tensor(np.zeros(n_out, dtype), requires_grad=True))
        for k in TAPS[: len(self.channels)]:
            side = _pooled(input_size, k - 1)
            assert side == -(-input_size // self.stride(k))

    def stride(self, tap):
        return 2 ** (tap - 1)

    def tap_channels(self, tap):
        return self.channels[tap - 1]

    def parameters(self, blocks=None):
        """Trainable tensors; ``blocks`` restricts to conv blocks (1-based) plus ``"fc"``."""
        out = []
        for i, (k, b) in enumerate(zip(self.conv_k, self.conv_b), start=1):
            if blocks is None or i in blocks:
                out += [k, b]
        if blocks is None or "fc" in blocks:
            for w, b in zip(self.fc_w, self.fc_b):
                out += [w, b]
        return out

    def named_parameters(self):
        out = {}
        for i, (k, b) in enumerate(zip(self.conv_k, self.conv_b), start=1):
            out[f"block{i}.kernel"] = k
            out[f"block{i}.bias"] = b
        for i, (w, b) in enumerate(zip(self.fc_w, self.fc_b)):
            out[f"fc{i}.weight"] = w
            out[f"fc{i}.bias"] = b
        return out

    @staticmethod
    def _as_images(x):
        x = as_tensor(x)
        if x.ndim == 2:
            return x.reshape(1, *x.shape, 1), True
        if x.ndim == 3:
            return x.reshape(*x.shape, 1), False
        if x.ndim == 4 and x.shape[-1] == 1:
            return x, False
        raise ShapeError(f"expected (H,W), (B,H,W) or (B,H,W,1) images, got {x.shape}")

    def block(self, i, h):
        """Conv + ReLU of block ``i`` (1-based); the tap value."""
        return relu(conv2d(h, self.conv_k[i - 1], self.conv_b[i - 1]))

    def taps(self, images, upto=None):
        """Tap features ``{k: (B,H,W,C)}`` for ``k <= upto``; works for any input size."""
        upto = len(self.channels) if upto is None else upto
        h, _ = self._as_images(images)
        feats = {}
        for k in range(1, upto + 1):
            if k > 1:
                h = maxpool2(h)
            h = self.block(k, h)
            feats[k] = h
        return feats

    def head(self, tap, features):
        """Continue the forward pass from tap features to logits."""
        h = as_tensor(features)
        for k in range(tap + 1, len(self.channels) + 1):
            h = self.block(k, maxpool2(h))
        h = flatten(maxpool2(h))
        if h.shape[1] != self.fc_w[0].shape[0]:
            raise ShapeError(
                f"flattened features have length {h.shape[1]}, dense layer expects {self.fc_w[0].shape[0]}; "
                f"logits need {self.input_size}x{self.input_size} inputs"
            )
        h = relu(dense(h, self.fc_w[0], self.fc_b[0]))
        return dense(h, self.fc_w[1], self.fc_b[1])

    def forward(self, images):
        feats = self.taps(images)
        return feats, self.head(len(self.channels), feats[len(self.channels)])

    def predict(self, images, batch_size=256):
        x = np.asarray(images, dtype=np.float64)
        out = []
        with no_grad():
            for i in range(0, len(x), batch_size):
                _, logits = self.forward(x[i : i + batch_size])
                out.append(logits.data.argmax(axis=1))
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)

    def state_dict(self):
        meta = np.array([*self.channels, self.kernel, self.hidden, self.n_classes, self.input_size], dtype=np.float64)
        state = {"backbone.config": meta}
        state.update({k: v.data for k, v in self.named_parameters().items()})
        return state

    @classmethod
    def from_state_dict(cls, state, dtype=np.float64):
        m = [int(round(v)) for v in np.asarray(state["backbone.config"])]
        bb = cls(channels=m[:-4], kernel=m[-4], hidden=m[-3], n_classes=m[-2], input_size=m[-1],
                 rng=np.random.default_rng(0), dtype=dtype)
        for name, p in bb.named_parameters().items():
            arr = np.asarray(state[name], dtype=dtype)
            if arr.shape != p.shape:
                raise ShapeError(f"{name}: stored shape {arr.shape} != expected {p.shape}")
            p.data = arr
        return bb

    def checksum(self):
        """Digest of every parameter value, for freeze assertions."""
        import hashlib

        h = hashlib.sha256()
        for name, p in sorted(self.named_parameters().items()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()


def backbone_forward(bb, image):
    """Tap features ``{1: ..., 2: ..., 3: ...}`` and classification logits."""
    with no_grad():
        feats, logits = bb.forward(image)
    return {k: v.data for k, v in feats.items()}, logits.data


def accuracy(bb, images, labels):
    labels = np.asarray(labels)
    if len(labels) == 0:
        return float("nan")
    return float((bb.predict(images) == labels).mean())


def train_backbone(images, labels, epochs=5, lr=1e-3, batch_size=32, seed=0, backbone=None, log=None):
    """Softmax cross-entropy training with ADAM; returns the backbone and per-epoch mean losses."""
    rng = np.random.default_rng(seed)
    init_rng, order_rng = (np.random.default_rng(s) for s in rng.bit_generator.seed_seq.spawn(2))
    x = np.asarray(images, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if len(x) != len(y):
        raise ShapeError(f"{len(x)} images but {len(y)} labels")
    bb = Backbone(input_size=x.shape[1], rng=init_rng) if backbone is None else backbone
    opt = Adam(bb.parameters(), lr=lr)
    history = []
    for epoch in range(epochs):
        perm = order_rng.permutation(len(x))
        losses = []
        for i in range(0, len(x), batch_size):
            idx = perm[i : i + batch_size]
            _, logits = bb.forward(x[idx])
            loss = softmax_cross_entropy(logits, y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(float(loss.data))
        history.append(float(np.mean(losses)))
        if log is not None:
            log(f"epoch {epoch + 1}/{epochs} loss {history[-1]:.4f}")
    return bb, history
