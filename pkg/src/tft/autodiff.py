"""Dense NHWC tensors with define-by-run reverse-mode differentiation.

Every operation returns a new :class:`Tensor` holding a reference to its
parents and a closure that maps the output gradient to parent gradients. The
graph is rebuilt on every forward pass and node outputs are never mutated.

Feature maps use the layout ``(H, W, C)`` or, batched, ``(B, H, W, C)``.
Convolution kernels are ``(kh, kw, C_in // groups, C_out)``; dense weights are
``(n_in, n_out)``.
"""

import contextlib
import threading

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError

_state = threading.local()


def is_grad_enabled():
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording the graph (inference, frozen models)."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    """An immutable array value plus the bookkeeping needed for backprop."""

    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "op")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.parents = ()
        self.backward_fn = None
        self.op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def backward(self):
        backward(self)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / other)

    def __pow__(self, exponent):
        if exponent != 2:
            raise NotImplementedError("only squaring is supported")
        return square(self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self):
        return mean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def make_node(data, parents, backward_fn, op):
    """Wrap ``data`` as the output of ``op``; record the edge only when needed."""
    out = Tensor(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
        out.op = op
    return out


def topological_order(root):
    """Nodes reachable from ``root`` that take part in differentiation, inputs first."""
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss, wrt=None):
    """Reverse sweep from a scalar ``loss``.

    Gradients are accumulated into ``.grad`` of every leaf that requires
    them. If ``wrt`` is given, the gradients of those tensors (leaf or not)
    are returned in the same order, zero-filled when unreachable.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = topological_order(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    wanted = {id(t) for t in wrt} if wrt is not None else set()
    kept = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if id(node) in wanted:
            kept[id(node)] = g
        if node.backward_fn is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    if wrt is None:
        return None
    return [kept.get(id(t), np.zeros_like(t.data)) for t in wrt]


# ----------------------------------------------------------------- elementwise


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return make_node(
        a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add"
    )


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return make_node(
        a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub"
    )


def mul(a, b):
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        c = float(b)
        return make_node(a.data * c, (a,), lambda g: (g * c,), "scale")
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_node(a.data * b.data, (a, b), back, "mul")


def square(x):
    return make_node(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,), "square")


def tsum(x, axis=None):
    shape = x.shape

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return make_node(np.asarray(x.data.sum(axis=axis)), (x,), back, "sum")


def mean(x):
    n = x.size
    shape = x.shape
    return make_node(
        np.asarray(x.data.mean()), (x,), lambda g: (np.full(shape, g / n, dtype=x.dtype),), "mean"
    )


def reshape(x, shape):
    old = x.shape
    return make_node(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def getitem(x, index):
    shape = x.shape

    def back(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[index] = g
        return (full,)

    return make_node(x.data[index], (x,), back, "getitem")


def relu(x):
    """max(0, x); the gradient at exactly zero is zero."""
    mask = x.data > 0
    return make_node(np.maximum(x.data, 0), (x,), lambda g: (g * mask,), "relu")


# ------------------------------------------------------------- convolution


def _same_pads(n, k, stride):
    out = -(-n // stride)
    total = max((out - 1) * stride + k - n, 0)
    return total // 2, total - total // 2


def conv2d(x, kernel, bias=None, stride=1, padding="same", groups=1):
    """2-D cross-correlation in NHWC layout.

    ``padding`` is ``"same"`` (zero padding, output size ``ceil(H / stride)``)
    or ``"valid"``. With ``groups > 1`` input and output channels are split
    into equal consecutive blocks convolved independently.
    """
    if stride < 1:
        raise ShapeError("stride must be a positive integer")
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects (B,)H,W,C input and 4-d kernel, got {x.shape}, {kernel.shape}")
    B, H, W, C = xd.shape
    kh, kw, cg, cout = kernel.shape
    if cg * groups != C:
        raise ShapeError(f"input has {C} channels but kernel expects {cg} x {groups} groups")
    if cout % groups:
        raise ShapeError(f"{cout} output channels do not split into {groups} groups")
    G, og = groups, cout // groups
    if padding == "same":
        pt, pb = _same_pads(H, kh, stride)
        pl, pr = _same_pads(W, kw, stride)
    elif padding == "valid":
        pt = pb = pl = pr = 0
    else:
        raise ValueError(f"unknown padding {padding!r}")
    Hp, Wp = H + pt + pb, W + pl + pr
    if kh > Hp or kw > Wp:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {Hp}x{Wp}")
    dt = np.result_type(xd, kernel.data)
    if stride == 1 and G == 1 and C >= 8:
        return _conv2d_shifted(x, kernel, bias, (pt, pb, pl, pr), G, squeeze, dt)
    xp = np.pad(xd, ((0, 0), (pt, pb), (pl, pr), (0, 0))) if pt + pb + pl + pr else xd
    Ho = (Hp - kh) // stride + 1
    Wo = (Wp - kw) // stride + 1
    M = B * Ho * Wo
    # columns in group-major order: (G, M, kh*kw*cg)
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    win = win.reshape(B, Ho, Wo, G, cg, kh, kw).transpose(3, 0, 1, 2, 5, 6, 4)
    cols = np.ascontiguousarray(win, dtype=dt).reshape(G, M, kh * kw * cg)
    kg = kernel.data.astype(dt, copy=False).reshape(kh, kw, cg, G, og)
    kg = kg.transpose(3, 0, 1, 2, 4).reshape(G, kh * kw * cg, og)
    out = np.empty((M, cout), dtype=dt)
    for g in range(G):
        np.matmul(cols[g], kg[g], out=out[:, g * og : (g + 1) * og])
    if bias is not None:
        out += bias.data
    out = out.reshape(B, Ho, Wo, cout)
    if squeeze:
        out = out[0]

    def back(gout):
        g2 = gout.reshape(M, cout)
        gk = gx = gb = None
        if kernel.requires_grad:
            gkg = np.stack([cols[g].T @ g2[:, g * og : (g + 1) * og] for g in range(G)])
            gk = gkg.reshape(G, kh, kw, cg, og).transpose(1, 2, 3, 0, 4).reshape(kh, kw, cg, cout)
        if x.requires_grad:
            gxp = np.zeros(xp.shape, dtype=dt)
            if G <= 4:
                # block-diagonal dense kernel keeps the column gradient pixel-major
                bd = np.zeros((G, og, kh, kw, G, cg), dtype=dt)
                k6 = kernel.data.astype(dt, copy=False).reshape(kh, kw, cg, G, og)
                for g in range(G):
                    bd[g, :, :, :, g, :] = k6[:, :, :, g, :].transpose(3, 0, 1, 2)
                dcols = (gout.reshape(M, cout) @ bd.reshape(cout, kh * kw * C)).reshape(B, Ho, Wo, kh, kw, C)
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, i : i + stride * (Ho - 1) + 1 : stride, j : j + stride * (Wo - 1) + 1 : stride] += dcols[
                            :, :, :, i, j
                        ]
            else:
                gm = np.ascontiguousarray(g2.reshape(M, G, og).transpose(1, 0, 2))
                dcols = np.matmul(gm, kg.transpose(0, 2, 1)).reshape(G, B, Ho, Wo, kh, kw, cg)
                gxv = gxp.reshape(B, Hp, Wp, G, cg)
                for i in range(kh):
                    for j in range(kw):
                        gxv[:, i : i + stride * (Ho - 1) + 1 : stride, j : j + stride * (Wo - 1) + 1 : stride] += dcols[
                            :, :, :, :, i, j, :
                        ].transpose(1, 2, 3, 0, 4)
            gx = gxp[:, pt : pt + H, pl : pl + W, :]
            gx = gx[0] if squeeze else gx
        if bias is not None and bias.requires_grad:
            gb = gout.reshape(M, cout).sum(axis=0)
        return gx, gk, gb

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return make_node(out, parents, back, "conv2d")


def _block_kernel(kernel, G, dt):
    """Grouped kernel as dense block-diagonal ``(kh, kw, C, cout)`` matrices."""
    kh, kw, cg, cout = kernel.shape
    k = kernel.astype(dt, copy=False)
    if G == 1:
        return k
    og = cout // G
    dense = np.zeros((kh, kw, cg * G, cout), dtype=dt)
    for g in range(G):
        dense[:, :, g * cg : (g + 1) * cg, g * og : (g + 1) * og] = k[..., g * og : (g + 1) * og]
    return dense


def _conv2d_shifted(x, kernel, bias, pads, G, squeeze, dt):
    """Stride-1 convolution without im2col.

    The padded batch is flattened to rows ``(b, y, x)``; a kernel offset
    ``(i, j)`` is then the contiguous row slice starting at ``i * Wp + j``, so
    every offset is one matmul. Rows that wrap past the right or bottom edge
    land outside the output window and are cropped (or zero in the backward).
    """
    pt, pb, pl, pr = pads
    xd = x.data[None] if squeeze else x.data
    B, H, W, C = xd.shape
    kh, kw, cg, cout = kernel.shape
    Hp, Wp = H + pt + pb, W + pl + pr
    Ho, Wo = Hp - kh + 1, Wp - kw + 1
    R = B * Hp * Wp
    xf = np.zeros((R + (kh - 1) * Wp + kw - 1, C), dtype=dt)
    xf[:R].reshape(B, Hp, Wp, C)[:, pt : pt + H, pl : pl + W] = xd
    kd = _block_kernel(kernel.data, G, dt)
    offsets = [(i, j, i * Wp + j) for i in range(kh) for j in range(kw)]
    acc = np.zeros((R, cout), dtype=dt)
    tmp = np.empty((R, cout), dtype=dt)
    for i, j, s in offsets:
        np.matmul(xf[s : s + R], kd[i, j], out=tmp)
        acc += tmp
    out = np.ascontiguousarray(acc.reshape(B, Hp, Wp, cout)[:, :Ho, :Wo])
    if bias is not None:
        out += bias.data
    if squeeze:
        out = out[0]

    def back(gout):
        gf = np.zeros((R, cout), dtype=dt)
        gf.reshape(B, Hp, Wp, cout)[:, :Ho, :Wo] = gout.reshape(B, Ho, Wo, cout)
        gk = gx = gb = None
        if kernel.requires_grad:
            og = cout // G
            gk = np.empty(kernel.shape, dtype=dt)
            for i, j, s in offsets:
                full = xf[s : s + R].T @ gf
                for g in range(G):
                    gk[i, j, :, g * og : (g + 1) * og] = full[g * cg : (g + 1) * cg, g * og : (g + 1) * og]
        if x.requires_grad:
            gxf = np.zeros_like(xf)
            tmpx = np.empty((R, C), dtype=dt)
            for i, j, s in offsets:
                np.matmul(gf, kd[i, j].T, out=tmpx)
                gxf[s : s + R] += tmpx
            gx = gxf[:R].reshape(B, Hp, Wp, C)[:, pt : pt + H, pl : pl + W]
            gx = gx[0] if squeeze else gx
        if bias is not None and bias.requires_grad:
            gb = gout.reshape(-1, cout).sum(axis=0)
        return gx, gk, gb

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return make_node(out, parents, back, "conv2d")


def maxpool2(x):
    """2x2 max pooling with stride 2.

    Odd spatial sizes are padded at the bottom/right with the most negative
    representable value. Ties go to the first element of the window in
    row-major order, which is also where the gradient is routed.
    """
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    B, H, W, C = xd.shape
    ph, pw = H % 2, W % 2
    if ph or pw:
        xd = np.pad(xd, ((0, 0), (0, ph), (0, pw), (0, 0)), constant_values=np.finfo(xd.dtype).min)
    Hh, Wh = (H + ph) // 2, (W + pw) // 2
    win = xd.reshape(B, Hh, 2, Wh, 2, C).transpose(0, 1, 3, 5, 2, 4).reshape(B, Hh, Wh, C, 4)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    if squeeze:
        out = out[0]

    def back(g):
        g4 = g[None] if squeeze else g
        gw = np.zeros((B, Hh, Wh, C, 4), dtype=g.dtype)
        np.put_along_axis(gw, arg[..., None], g4[..., None], axis=-1)
        gx = gw.reshape(B, Hh, Wh, C, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(B, 2 * Hh, 2 * Wh, C)
        gx = gx[:, :H, :W, :]
        return (gx[0] if squeeze else gx,)

    return make_node(out, (x,), back, "maxpool2")


def dense(x, weights, bias=None):
    """Affine map ``x @ weights + bias`` for ``x`` of shape (n_in,) or (B, n_in)."""
    if x.shape[-1] != weights.shape[0]:
        raise ShapeError(f"input length {x.shape[-1]} does not match {weights.shape[0]} weight rows")
    if bias is not None and bias.shape != (weights.shape[1],):
        raise ShapeError(f"bias shape {bias.shape} does not match {weights.shape[1]} outputs")
    out = x.data @ weights.data
    if bias is not None:
        out = out + bias.data

    def back(g):
        gx = g @ weights.data.T if x.requires_grad else None
        if weights.requires_grad:
            gw = np.outer(x.data, g) if x.ndim == 1 else x.data.T @ g
        else:
            gw = None
        gb = None
        if bias is not None and bias.requires_grad:
            gb = g if g.ndim == 1 else g.sum(axis=0)
        return gx, gw, gb

    parents = (x, weights) if bias is None else (x, weights, bias)
    return make_node(out, parents, back, "dense")


def flatten(x):
    """(B, ...) -> (B, prod(...))."""
    return reshape(x, (x.shape[0], -1))


def weighted_group_sum(x, weights, groups):
    """Collapse ``groups`` consecutive channel blocks into one weighted sum.

    ``x`` has ``groups * m`` channels; ``weights`` is a (groups,) vector
    shared by the batch or a (B, groups) matrix with one row per sample.
    Returns ``sum_g weights[g] * x[..., g*m:(g+1)*m]``.
    """
    w = as_tensor(weights)
    xd = x.data
    lead, c = xd.shape[:-1], xd.shape[-1]
    if c % groups:
        raise ShapeError(f"{c} channels do not split into {groups} groups")
    m = c // groups
    xr = xd.reshape(*lead, groups, m)
    wd = w.data.astype(xd.dtype, copy=False)
    if w.ndim == 1:
        if w.shape[0] != groups:
            raise ShapeError(f"expected {groups} weights, got {w.shape[0]}")
        out = np.einsum("...gm,g->...m", xr, wd)
    else:
        if w.shape != (xd.shape[0], groups):
            raise ShapeError(f"expected weights of shape {(xd.shape[0], groups)}, got {w.shape}")
        out = np.einsum("b...gm,bg->b...m", xr, wd)

    def back(gout):
        gx = gw = None
        if x.requires_grad:
            if w.ndim == 1:
                gx = (gout[..., None, :] * wd[:, None]).reshape(xd.shape)
            else:
                wb = wd.reshape((xd.shape[0],) + (1,) * (xd.ndim - 2) + (groups, 1))
                gx = (gout[..., None, :] * wb).reshape(xd.shape)
        if w.requires_grad:
            prod = np.einsum("...gm,...m->...g", xr, gout)
            if w.ndim == 1:
                gw = prod.reshape(-1, groups).sum(axis=0)
            else:
                gw = prod.reshape(xd.shape[0], -1, groups).sum(axis=1)
            gw = gw.astype(w.dtype, copy=False)
        return gx, gw

    return make_node(out, (x, w), back, "weighted_group_sum")


def softmax_cross_entropy(logits, labels):
    """Mean softmax cross-entropy of (B, K) logits against integer labels."""
    labels = np.asarray(labels, dtype=np.int64)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = len(labels)
    loss = -logp[np.arange(n), labels].mean()

    def back(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        return (p * (g / n),)

    return make_node(np.asarray(loss), (logits,), back, "softmax_xent")


# ---------------------------------------------------------------- checking


class GradcheckResult:
    """Outcome of :func:`gradcheck`.

    ``max_rel`` is taken over entries whose magnitude is at least
    ``small``; entries below it are judged by ``max_abs_small`` instead.
    """

    def __init__(self, max_rel, max_abs_small, rtol, atol):
        self.max_rel = max_rel
        self.max_abs_small = max_abs_small
        self.ok = max_rel < rtol and max_abs_small < atol

    def __repr__(self):
        return f"GradcheckResult(max_rel={self.max_rel:.3g}, max_abs_small={self.max_abs_small:.3g}, ok={self.ok})"


def gradcheck(fn, inputs, eps=1e-5, rtol=1e-4, atol=1e-7, small=1e-3, max_entries=None, rng=None):
    """Compare analytic gradients of scalar ``fn(*inputs)`` with central differences.

    ``max_entries`` caps the number of probed coordinates per input
    (sampled with ``rng``); ``None`` probes every entry.
    """
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    analytic = backward(fn(*inputs), wrt=inputs)
    rng = np.random.default_rng(0) if rng is None else rng
    max_rel = 0.0
    max_abs = 0.0
    with no_grad():
        for t, ga in zip(inputs, analytic):
            flat = t.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_entries is not None and flat.size > max_entries:
                idx = rng.choice(flat.size, size=max_entries, replace=False)
            for k in idx:
                orig = flat[k]
                flat[k] = orig + eps
                fp = float(fn(*inputs).data)
                flat[k] = orig - eps
                fm = float(fn(*inputs).data)
                flat[k] = orig
                num = (fp - fm) / (2 * eps)
                ana = float(ga.reshape(-1)[k])
                mag = max(abs(num), abs(ana))
                if mag < small:
                    max_abs = max(max_abs, abs(num - ana))
                else:
                    max_rel = max(max_rel, abs(num - ana) / mag)
    return GradcheckResult(max_rel, max_abs, rtol, atol)
