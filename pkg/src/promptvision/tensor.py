"""Dense float64 tensors with reverse-mode automatic differentiation.

Every primitive records itself on the active tape when gradients are
needed; `backward` replays the tape in reverse. Gradients accumulate
additively, zeroing is the caller's job. All data is 64-bit so that
analytic gradients can be checked against central finite differences
at tight tolerances.
"""

from __future__ import annotations

import math

import numpy as np

_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
_GELU_C = 0.044715


class TensorError(ValueError):
    """Shape mismatch, non-finite values, or misuse of a primitive."""


def _as_array(x):
    return np.asarray(x, dtype=np.float64)


def _check_finite(op, *arrays):
    for a in arrays:
        # sum() propagates any NaN/Inf; avoids allocating a bool mask.
        if a.size and not math.isfinite(float(np.sum(a))):
            raise TensorError(f"{op}: non-finite values in input of shape {a.shape}")


class Tensor:
    """Value node. `grad` is a plain ndarray of the same shape, or None."""

    __slots__ = ("data", "requires_grad", "grad", "tape", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.tape = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def detach(self):
        return Tensor(self.data.copy())

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # Convenience arithmetic; anything heavier goes through the module functions.
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

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, key):
        return slice_(self, key)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of primitive applications for one forward pass.

    Nodes are appended in execution order, which is a topological order
    by construction. Use as a context manager; with no tape active,
    primitives run in inference mode and record nothing.
    """

    def __init__(self):
        self.nodes = []  # list of (out Tensor, backward fn)

    def __enter__(self):
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc):
        popped = _tape_stack.pop()
        assert popped is self

    def backward(self, loss):
        if loss.data.ndim != 0 and loss.data.size != 1:
            raise TensorError(f"backward: loss must be scalar, got shape {loss.data.shape}")
        if loss.tape is not self:
            raise TensorError("backward: loss was not recorded on this tape")
        loss.grad = np.ones_like(loss.data)
        for out, fn in reversed(self.nodes):
            if out.grad is not None:
                fn(out.grad)


_tape_stack: list[Tape] = []


def active_tape():
    return _tape_stack[-1] if _tape_stack else None


def backward(loss):
    """Populate `.grad` on every upstream tensor with requires_grad."""
    if not isinstance(loss, Tensor) or loss.tape is None:
        raise TensorError("backward: loss is not on any tape")
    loss.tape.backward(loss)


def _make_out(data, inputs, backward_fn, op):
    tape = active_tape()
    out = Tensor(data)
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.tape = tape
        tape.nodes.append((out, backward_fn))
    return out


def _unbroadcast(target_shape, g):
    """Sum `g` down to `target_shape` after a broadcast forward op."""
    while g.ndim > len(target_shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(target_shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise / broadcasting primitives
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_finite("add", a.data, b.data)
    try:
        data = a.data + b.data
    except ValueError:
        raise TensorError(f"add: incompatible shapes {a.data.shape} and {b.data.shape}")

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(a.data.shape, g))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(b.data.shape, g))

    return _make_out(data, (a, b), bwd, "add")


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_finite("sub", a.data, b.data)
    try:
        data = a.data - b.data
    except ValueError:
        raise TensorError(f"sub: incompatible shapes {a.data.shape} and {b.data.shape}")

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(a.data.shape, g))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(b.data.shape, -g))

    return _make_out(data, (a, b), bwd, "sub")


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_finite("mul", a.data, b.data)
    try:
        data = a.data * b.data
    except ValueError:
        raise TensorError(f"mul: incompatible shapes {a.data.shape} and {b.data.shape}")

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(a.data.shape, g * b.data))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(b.data.shape, g * a.data))

    return _make_out(data, (a, b), bwd, "mul")


def div(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_finite("div", a.data, b.data)
    try:
        data = a.data / b.data
    except ValueError:
        raise TensorError(f"div: incompatible shapes {a.data.shape} and {b.data.shape}")

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(a.data.shape, g / b.data))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(b.data.shape, -g * a.data / (b.data * b.data)))

    return _make_out(data, (a, b), bwd, "div")


def neg(a):
    a = _as_tensor(a)
    _check_finite("neg", a.data)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(-g)

    return _make_out(-a.data, (a,), bwd, "neg")


def exp(a):
    a = _as_tensor(a)
    _check_finite("exp", a.data)
    data = np.exp(a.data)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g * data)

    return _make_out(data, (a,), bwd, "exp")


def log(a):
    a = _as_tensor(a)
    _check_finite("log", a.data)
    data = np.log(a.data)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g / a.data)

    return _make_out(data, (a,), bwd, "log")


def sqrt(a):
    a = _as_tensor(a)
    _check_finite("sqrt", a.data)
    data = np.sqrt(a.data)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g * 0.5 / data)

    return _make_out(data, (a,), bwd, "sqrt")


def abs_(a):
    a = _as_tensor(a)
    _check_finite("abs", a.data)
    data = np.abs(a.data)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g * np.sign(a.data))

    return _make_out(data, (a,), bwd, "abs")


def maximum(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_finite("maximum", a.data, b.data)
    data = np.maximum(a.data, b.data)
    mask = a.data >= b.data  # ties route to the first argument

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(a.data.shape, g * mask))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(b.data.shape, g * ~mask))

    return _make_out(data, (a, b), bwd, "maximum")


def minimum(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_finite("minimum", a.data, b.data)
    data = np.minimum(a.data, b.data)
    mask = a.data <= b.data

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(a.data.shape, g * mask))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(b.data.shape, g * ~mask))

    return _make_out(data, (a, b), bwd, "minimum")


def sigmoid(a):
    a = _as_tensor(a)
    _check_finite("sigmoid", a.data)
    data = 1.0 / (1.0 + np.exp(-a.data))

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g * data * (1.0 - data))

    return _make_out(data, (a,), bwd, "sigmoid")


def gelu(a):
    """GELU, tanh approximation."""
    a = _as_tensor(a)
    _check_finite("gelu", a.data)
    x = a.data
    inner = _SQRT_2_OVER_PI * (x + _GELU_C * x ** 3)
    t = np.tanh(inner)
    data = 0.5 * x * (1.0 + t)

    def bwd(g):
        if a.requires_grad:
            d_inner = _SQRT_2_OVER_PI * (1.0 + 3.0 * _GELU_C * x ** 2)
            da = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
            a.accumulate_grad(g * da)

    return _make_out(data, (a,), bwd, "gelu")


def relu(a):
    a = _as_tensor(a)
    _check_finite("relu", a.data)
    data = np.maximum(a.data, 0.0)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g * (a.data > 0))

    return _make_out(data, (a,), bwd, "relu")


# ---------------------------------------------------------------------------
# shape / gather primitives
# ---------------------------------------------------------------------------

def reshape(a, shape):
    a = _as_tensor(a)
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise TensorError(f"reshape: cannot view {a.data.shape} as {shape}")

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g.reshape(a.data.shape))

    return _make_out(data, (a,), bwd, "reshape")


def transpose(a, axes=None):
    a = _as_tensor(a)
    data = np.transpose(a.data, axes)
    if axes is None:
        inv = None
    else:
        inv = np.argsort(axes)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(np.transpose(g, inv))

    return _make_out(data, (a,), bwd, "transpose")


def swap_last2(a):
    """Transpose the last two axes (matmul helper for stacked matrices)."""
    a = _as_tensor(a)
    data = np.swapaxes(a.data, -1, -2)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(np.swapaxes(g, -1, -2))

    return _make_out(data, (a,), bwd, "swap_last2")


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise TensorError("concat: empty input list")
    _check_finite("concat", *[t.data for t in tensors])
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise TensorError(
            f"concat: incompatible shapes {[t.data.shape for t in tensors]} on axis {axis}"
        )
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t.accumulate_grad(g[tuple(idx)])

    return _make_out(data, tuple(tensors), bwd, "concat")


def slice_(a, key):
    a = _as_tensor(a)
    data = a.data[key]

    def bwd(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            np.add.at(full, key, g)
            a.accumulate_grad(full)

    return _make_out(data, (a,), bwd, "slice")


def embedding_lookup(table, ids):
    """Gather rows of `table` (V x d) at integer `ids` (any shape)."""
    table = _as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if table.data.ndim != 2:
        raise TensorError(f"embedding_lookup: table must be 2-D, got {table.data.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise TensorError(
            f"embedding_lookup: id out of range [0, {table.data.shape[0]}): "
            f"min={ids.min() if ids.size else None} max={ids.max() if ids.size else None}"
        )
    _check_finite("embedding_lookup", table.data)
    data = table.data[ids]

    def bwd(g):
        if table.requires_grad:
            full = np.zeros_like(table.data)
            np.add.at(full, ids.reshape(-1), g.reshape(-1, table.data.shape[1]))
            table.accumulate_grad(full)

    return _make_out(data, (table,), bwd, "embedding_lookup")


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def sum_(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    _check_finite("sum", a.data)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if a.requires_grad:
            gg = g
            if axis is not None and not keepdims:
                gg = np.expand_dims(gg, axis)
            a.accumulate_grad(np.broadcast_to(gg, a.data.shape).copy())

    return _make_out(data, (a,), bwd, "sum")


def mean(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    _check_finite("mean", a.data)
    data = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size if axis is None else a.data.shape[axis]

    def bwd(g):
        if a.requires_grad:
            gg = g
            if axis is not None and not keepdims:
                gg = np.expand_dims(gg, axis)
            a.accumulate_grad(np.broadcast_to(gg, a.data.shape) / count)

    return _make_out(data, (a,), bwd, "mean")


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b):
    """Matrix product; leading axes broadcast as in np.matmul."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.shape[-1] != b.data.shape[-2 if b.data.ndim > 1 else 0]:
        raise TensorError(f"matmul: incompatible shapes {a.data.shape} and {b.data.shape}")
    _check_finite("matmul", a.data, b.data)
    data = np.matmul(a.data, b.data)

    def bwd(g):
        if a.requires_grad:
            if b.data.ndim == 1:
                ga = np.multiply.outer(g, b.data) if g.ndim else g * b.data
            else:
                ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a.accumulate_grad(_unbroadcast(a.data.shape, ga))
        if b.requires_grad:
            if a.data.ndim == 1:
                gb = np.multiply.outer(a.data, g) if g.ndim else a.data * g
            else:
                gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            b.accumulate_grad(_unbroadcast(b.data.shape, gb))

    return _make_out(data, (a, b), bwd, "matmul")


# ---------------------------------------------------------------------------
# normalization and classification heads
# ---------------------------------------------------------------------------

def softmax(a, axis=-1):
    a = _as_tensor(a)
    _check_finite("softmax", a.data)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        if a.requires_grad:
            dot = (g * data).sum(axis=axis, keepdims=True)
            a.accumulate_grad((g - dot) * data)

    return _make_out(data, (a,), bwd, "softmax")


def layer_norm(a, gain=None, bias=None, eps=1e-5):
    """Normalize over the last axis to zero mean / unit variance, then scale+shift."""
    a = _as_tensor(a)
    _check_finite("layer_norm", a.data)
    mu = a.data.mean(axis=-1, keepdims=True)
    var = a.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    norm = (a.data - mu) * inv
    g_t = _as_tensor(gain) if gain is not None else None
    b_t = _as_tensor(bias) if bias is not None else None
    data = norm
    if g_t is not None:
        data = data * g_t.data
    if b_t is not None:
        data = data + b_t.data
    n = a.data.shape[-1]

    def bwd(g):
        gy = g * g_t.data if g_t is not None else g
        if a.requires_grad:
            m1 = gy.mean(axis=-1, keepdims=True)
            m2 = (gy * norm).mean(axis=-1, keepdims=True)
            a.accumulate_grad((gy - m1 - norm * m2) * inv)
        if g_t is not None and g_t.requires_grad:
            g_t.accumulate_grad((g * norm).reshape(-1, n).sum(axis=0))
        if b_t is not None and b_t.requires_grad:
            b_t.accumulate_grad(g.reshape(-1, n).sum(axis=0))

    inputs = [a] + [t for t in (g_t, b_t) if t is not None]
    return _make_out(data, tuple(inputs), bwd, "layer_norm")


def cross_entropy_from_logits(logits, targets, axis=-1):
    """Per-row -log softmax(logits)[target]; `targets` are integer ids."""
    logits = _as_tensor(logits)
    if axis != -1:
        raise TensorError("cross_entropy_from_logits: only axis=-1 supported")
    ids = np.asarray(targets, dtype=np.int64)
    if ids.shape != logits.data.shape[:-1]:
        raise TensorError(
            f"cross_entropy_from_logits: targets shape {ids.shape} does not match "
            f"logits rows {logits.data.shape[:-1]}"
        )
    if ids.size and (ids.min() < 0 or ids.max() >= logits.data.shape[-1]):
        raise TensorError("cross_entropy_from_logits: target id out of range")
    _check_finite("cross_entropy_from_logits", logits.data)
    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - lse
    picked = np.take_along_axis(logp, ids[..., None], axis=-1)[..., 0]
    data = -picked

    def bwd(g):
        if logits.requires_grad:
            p = np.exp(logp)
            if ids.ndim:
                p[(*np.indices(ids.shape), ids)] -= 1.0
            else:
                p[ids] -= 1.0
            logits.accumulate_grad(p * np.asarray(g)[..., None])

    return _make_out(data, (logits,), bwd, "cross_entropy_from_logits")


# ---------------------------------------------------------------------------
# convolution and sampling (fused primitives, kept fast with im2col)
# ---------------------------------------------------------------------------

def _im2col(x, k, stride, pad):
    b, c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh = (x.shape[2] - k) // stride + 1
    ow = (x.shape[3] - k) // stride + 1
    s0, s1, s2, s3 = x.strides
    windows = np.lib.stride_tricks.as_strided(
        x,
        shape=(b, c, oh, ow, k, k),
        strides=(s0, s1, s2 * stride, s3 * stride, s2, s3),
        writeable=False,
    )
    # (b, oh, ow, c*k*k)
    return windows.transpose(0, 2, 3, 1, 4, 5).reshape(b, oh, ow, c * k * k), oh, ow


def conv2d(x, weight, bias=None, stride=1, pad=0):
    """2-D convolution. x: (B,C,H,W), weight: (OC,C,k,k), bias: (OC,)."""
    x, weight = _as_tensor(x), _as_tensor(weight)
    b_t = _as_tensor(bias) if bias is not None else None
    if x.data.ndim != 4 or weight.data.ndim != 4 or x.data.shape[1] != weight.data.shape[1]:
        raise TensorError(
            f"conv2d: incompatible shapes x={x.data.shape} weight={weight.data.shape}"
        )
    _check_finite("conv2d", x.data, weight.data)
    oc, c, k, _ = weight.data.shape
    cols, oh, ow = _im2col(x.data, k, stride, pad)
    wm = weight.data.reshape(oc, -1)
    out = cols.reshape(-1, c * k * k) @ wm.T
    if b_t is not None:
        out = out + b_t.data
    data = out.reshape(x.data.shape[0], oh, ow, oc).transpose(0, 3, 1, 2)

    def bwd(g):
        gflat = g.transpose(0, 2, 3, 1).reshape(-1, oc)
        if weight.requires_grad:
            gw = gflat.T @ cols.reshape(-1, c * k * k)
            weight.accumulate_grad(gw.reshape(weight.data.shape))
        if b_t is not None and b_t.requires_grad:
            b_t.accumulate_grad(gflat.sum(axis=0))
        if x.requires_grad:
            gcols = (gflat @ wm).reshape(x.data.shape[0], oh, ow, c, k, k)
            hpad, wpad = x.data.shape[2] + 2 * pad, x.data.shape[3] + 2 * pad
            gx = np.zeros((x.data.shape[0], c, hpad, wpad))
            for i in range(k):
                for j in range(k):
                    gx[:, :, i:i + oh * stride:stride, j:j + ow * stride:stride] += (
                        gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                    )
            if pad:
                gx = gx[:, :, pad:-pad, pad:-pad]
            x.accumulate_grad(gx)

    inputs = [x, weight] + ([b_t] if b_t is not None else [])
    return _make_out(data, tuple(inputs), bwd, "conv2d")


def group_norm(x, groups, gain, bias, eps=1e-5):
    """Group normalization over (B,C,H,W); gain/bias are per-channel."""
    x = _as_tensor(x)
    g_t, b_t = _as_tensor(gain), _as_tensor(bias)
    b, c, h, w = x.data.shape
    if c % groups:
        raise TensorError(f"group_norm: channels {c} not divisible by groups {groups}")
    _check_finite("group_norm", x.data)
    xg = x.data.reshape(b, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    var = xg.var(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    norm = ((xg - mu) * inv).reshape(b, c, h, w)
    data = norm * g_t.data[None, :, None, None] + b_t.data[None, :, None, None]

    def bwd(g):
        if g_t.requires_grad:
            g_t.accumulate_grad((g * norm).sum(axis=(0, 2, 3)))
        if b_t.requires_grad:
            b_t.accumulate_grad(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gy = (g * g_t.data[None, :, None, None]).reshape(b, groups, -1)
            ng = norm.reshape(b, groups, -1)
            m1 = gy.mean(axis=2, keepdims=True)
            m2 = (gy * ng).mean(axis=2, keepdims=True)
            x.accumulate_grad(((gy - m1 - ng * m2) * inv).reshape(b, c, h, w))

    return _make_out(data, (x, g_t, b_t), bwd, "group_norm")


def bilinear_sample(fmap, xs, ys):
    """Bilinear sampling of `fmap` (B,C,H,W) at pixel coords xs,ys (B,N).

    Coordinates are in feature-map pixel units (0..W-1 / 0..H-1) and are
    clamped to the border. Differentiable in the feature map and in the
    coordinates (piecewise-linear in the latter).
    """
    fmap, xs, ys = _as_tensor(fmap), _as_tensor(xs), _as_tensor(ys)
    b, c, h, w = fmap.data.shape
    if xs.data.shape != ys.data.shape or xs.data.shape[0] != b:
        raise TensorError(
            f"bilinear_sample: coord shapes {xs.data.shape}/{ys.data.shape} "
            f"do not match batch {b}"
        )
    _check_finite("bilinear_sample", fmap.data, xs.data, ys.data)
    n = xs.data.shape[1]
    xc = np.clip(xs.data, 0.0, w - 1.0)
    yc = np.clip(ys.data, 0.0, h - 1.0)
    x0 = np.minimum(np.floor(xc), w - 2 if w > 1 else 0).astype(np.int64)
    y0 = np.minimum(np.floor(yc), h - 2 if h > 1 else 0).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = xc - x0
    fy = yc - y0
    bi = np.arange(b)[:, None]
    f00 = fmap.data[bi, :, y0, x0]  # (B,N,C)
    f01 = fmap.data[bi, :, y0, x1]
    f10 = fmap.data[bi, :, y1, x0]
    f11 = fmap.data[bi, :, y1, x1]
    w00 = ((1 - fy) * (1 - fx))[..., None]
    w01 = ((1 - fy) * fx)[..., None]
    w10 = (fy * (1 - fx))[..., None]
    w11 = (fy * fx)[..., None]
    data = f00 * w00 + f01 * w01 + f10 * w10 + f11 * w11  # (B,N,C)

    def bwd(g):
        if fmap.requires_grad:
            gf = np.zeros((b, h * w, c))
            bidx = np.repeat(np.arange(b), n)
            for yy, xx, ww in ((y0, x0, w00), (y0, x1, w01), (y1, x0, w10), (y1, x1, w11)):
                lin = (yy * w + xx).reshape(-1)
                np.add.at(gf.reshape(-1, c), bidx * (h * w) + lin, (g * ww).reshape(-1, c))
            fmap.accumulate_grad(gf.reshape(b, h, w, c).transpose(0, 3, 1, 2))
        in_x = (xs.data > 0.0) & (xs.data < w - 1.0)
        in_y = (ys.data > 0.0) & (ys.data < h - 1.0)
        if xs.requires_grad:
            dfx = ((f01 - f00) * (1 - fy)[..., None] + (f11 - f10) * fy[..., None])
            xs.accumulate_grad((g * dfx).sum(axis=-1) * in_x)
        if ys.requires_grad:
            dfy = ((f10 - f00) * (1 - fx)[..., None] + (f11 - f01) * fx[..., None])
            ys.accumulate_grad((g * dfy).sum(axis=-1) * in_y)

    return _make_out(data, (fmap, xs, ys), bwd, "bilinear_sample")


# ---------------------------------------------------------------------------
# dispatcher and registry
# ---------------------------------------------------------------------------

PRIMITIVES = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "neg": neg,
    "exp": exp,
    "log": log,
    "sqrt": sqrt,
    "abs": abs_,
    "maximum": maximum,
    "minimum": minimum,
    "sigmoid": sigmoid,
    "gelu": gelu,
    "relu": relu,
    "reshape": reshape,
    "transpose": transpose,
    "swap_last2": swap_last2,
    "concat": concat,
    "slice": slice_,
    "embedding_lookup": embedding_lookup,
    "sum": sum_,
    "mean": mean,
    "matmul": matmul,
    "softmax": softmax,
    "layer_norm": layer_norm,
    "cross_entropy_from_logits": cross_entropy_from_logits,
    "conv2d": conv2d,
    "group_norm": group_norm,
    "bilinear_sample": bilinear_sample,
}


def primitive_forward(op_kind, *inputs, **attrs):
    """Apply a primitive by name. Unknown kinds raise TensorError."""
    if op_kind not in PRIMITIVES:
        raise TensorError(f"unknown primitive {op_kind!r}")
    return PRIMITIVES[op_kind](*inputs, **attrs)
