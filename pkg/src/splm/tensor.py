"""Reverse-mode autodiff engine on numpy arrays.

Only the primitives the rest of the package needs are implemented: dense
matmul, causal 1-D convolution (single kernel and banked), relu, softmax,
layer norm, embedding lookup, elementwise arithmetic, reductions, shape
ops, cross-entropy and Huber losses. 64-bit floats are the default; 32-bit
can be selected globally for faster training runs.
"""

from __future__ import annotations

import warnings

import numpy as np

_DEFAULT_DTYPE = np.dtype(np.float64)
_GRAD_ENABLED = True

_DTYPE_NAMES = {"f32": np.float32, "f64": np.float64,
                "float32": np.float32, "float64": np.float64}


def set_default_dtype(dtype) -> None:
    """Set the dtype new tensors are created with ("f32"/"f64" or a numpy dtype)."""
    global _DEFAULT_DTYPE
    if isinstance(dtype, str):
        if dtype not in _DTYPE_NAMES:
            raise ValueError(f"unknown precision {dtype!r}, expected f32 or f64")
        dtype = _DTYPE_NAMES[dtype]
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dt}")
    _DEFAULT_DTYPE = dt


def default_dtype() -> np.dtype:
    return _DEFAULT_DTYPE


class no_grad:
    """Context manager that suspends tape construction."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


class TapeNode:
    """One recorded op: inputs plus a closure mapping output grad to input grads."""

    __slots__ = ("op", "inputs", "grad_fn")

    def __init__(self, op, inputs, grad_fn):
        self.op = op
        self.inputs = inputs
        self.grad_fn = grad_fn


class Tensor:
    """N-dimensional float array participating in the gradient tape."""

    __slots__ = ("data", "grad", "requires_grad", "node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        self.grad = None
        self.requires_grad = requires_grad
        self.node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"

    # arithmetic

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -other)

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not a supported primitive")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    # shape helpers

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def relu(self):
        return relu(self)


def _ensure(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _from_op(data, op, inputs, grad_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = _GRAD_ENABLED and any(t.requires_grad for t in inputs)
    out.node = TapeNode(op, inputs, grad_fn) if out.requires_grad else None
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce a broadcast gradient back to the original operand shape."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise and linear algebra


def add(a, b) -> Tensor:
    a, b = _ensure(a), _ensure(b)
    na, nb = a.requires_grad, b.requires_grad

    def grad_fn(g):
        return (_unbroadcast(g, a.shape) if na else None,
                _unbroadcast(g, b.shape) if nb else None)

    return _from_op(a.data + b.data, "add", (a, b), grad_fn)


def mul(a, b) -> Tensor:
    a, b = _ensure(a), _ensure(b)
    na, nb = a.requires_grad, b.requires_grad

    def grad_fn(g):
        return (_unbroadcast(g * b.data, a.shape) if na else None,
                _unbroadcast(g * a.data, b.shape) if nb else None)

    return _from_op(a.data * b.data, "mul", (a, b), grad_fn)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must have at least 2 dimensions")
    na, nb = a.requires_grad, b.requires_grad

    def grad_fn(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if na else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if nb else None
        return ga, gb

    return _from_op(a.data @ b.data, "matmul", (a, b), grad_fn)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0  # subgradient at 0 is 0

    def grad_fn(g):
        return (g * mask,)

    return _from_op(np.where(mask, x.data, 0.0), "relu", (x,), grad_fn)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        dot = (g * p).sum(axis=axis, keepdims=True)
        return ((g - dot) * p,)

    return _from_op(p, "softmax", (x,), grad_fn)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    needs = (x.requires_grad, gain.requires_grad, bias.requires_grad)

    def grad_fn(g):
        dgain = _unbroadcast(g * xhat, gain.shape) if needs[1] else None
        dbias = _unbroadcast(g, bias.shape) if needs[2] else None
        if needs[0]:
            dxhat = g * gain.data
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            dx = inv * (dxhat - m1 - xhat * m2)
        else:
            dx = None
        return dx, dgain, dbias

    return _from_op(xhat * gain.data + bias.data, "layer_norm", (x, gain, bias), grad_fn)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ValueError("embedding id out of range")
    width = table.shape[1]

    def grad_fn(g):
        dt = np.zeros_like(table.data)
        np.add.at(dt, ids.reshape(-1), g.reshape(-1, width))
        return (dt,)

    return _from_op(table.data[ids], "embedding", (table,), grad_fn)


# ---------------------------------------------------------------------------
# shape ops


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)

    def grad_fn(g):
        return (g.reshape(x.shape),)

    return _from_op(x.data.reshape(shape), "reshape", (x,), grad_fn)


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def grad_fn(g):
        return (np.transpose(g, inverse),)

    return _from_op(np.transpose(x.data, axes), "transpose", (x,), grad_fn)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Slice `length` entries starting at `start` along `axis`."""
    if start < 0 or start + length > x.shape[axis]:
        raise ValueError("narrow range out of bounds")
    index = tuple(slice(start, start + length) if i == axis else slice(None)
                  for i in range(x.ndim))

    def grad_fn(g):
        dx = np.zeros_like(x.data)
        dx[index] = g
        return (dx,)

    return _from_op(x.data[index], "narrow", (x,), grad_fn)


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = tuple(tensors)

    def grad_fn(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _from_op(np.stack([t.data for t in tensors], axis=axis),
                    "stack", tensors, grad_fn)


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = tuple(tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        return tuple(np.split(g, splits, axis=axis))

    return _from_op(np.concatenate([t.data for t in tensors], axis=axis),
                    "concat", tensors, grad_fn)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _from_op(data, "sum", (x,), grad_fn)


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.size if axis is None else x.shape[axis]
    data = x.data.mean(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        if axis is None:
            return (np.broadcast_to(g / count, x.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return _from_op(data, "mean", (x,), grad_fn)


def dropout(x: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    if not 0.0 <= p < 1.0:
        raise ValueError("dropout rate must be in [0, 1)")
    if p == 0.0:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)

    def grad_fn(g):
        return (g * keep,)

    return _from_op(x.data * keep, "dropout", (x,), grad_fn)


# ---------------------------------------------------------------------------
# causal convolution

def causal_conv1d(signal: Tensor, kernel: Tensor) -> Tensor:
    """out[t] = sum_j kernel[j] * signal[t-j], with signal[n] = 0 for n < 0.

    Taps are accumulated in ascending j order, so the result is bit-identical
    to the naive double loop.
    """
    if signal.ndim != 1 or kernel.ndim != 1:
        raise ValueError("causal_conv1d expects 1-D signal and kernel")
    if signal.size == 0 or kernel.size == 0:
        raise ValueError("empty signal or kernel")
    s, k = signal.data, kernel.data
    length, taps = s.shape[0], k.shape[0]
    out = np.zeros(length, dtype=s.dtype)
    for j in range(min(taps, length)):
        out[j:] += k[j] * s[:length - j]
    ns, nk = signal.requires_grad, kernel.requires_grad

    def grad_fn(g):
        ds = np.zeros_like(s) if ns else None
        dk = np.zeros_like(k) if nk else None
        for j in range(min(taps, length)):
            if ns:
                ds[:length - j] += k[j] * g[j:]
            if nk:
                dk[j] = (g[j:] * s[:length - j]).sum()
        return ds, dk

    return _from_op(out, "causal_conv1d", (signal, kernel), grad_fn)


def causal_conv_bank(x: Tensor, kernels: Tensor) -> Tensor:
    """Apply a bank of causal kernels to every coordinate signal of a batch.

    x is [B, L, E] (token axis L, embedding axis E), kernels is [M, K];
    output is [B, L, E, M] with out[b, t, i, m] = sum_j kernels[m, j] * x[b, t-j, i].
    """
    if x.ndim != 3 or kernels.ndim != 2:
        raise ValueError("causal_conv_bank expects x[B,L,E] and kernels[M,K]")
    if kernels.size == 0 or x.size == 0:
        raise ValueError("empty signal or kernel bank")
    xd, kd = x.data, kernels.data
    nb, length, width = xd.shape
    nk, taps = kd.shape
    out = np.zeros((nb, length, width, nk), dtype=xd.dtype)
    for j in range(min(taps, length)):
        out[:, j:, :, :] += xd[:, :length - j, :, None] * kd[:, j]
    nx, nkg = x.requires_grad, kernels.requires_grad

    def grad_fn(g):
        dx = np.zeros_like(xd) if nx else None
        dk = np.zeros_like(kd) if nkg else None
        for j in range(min(taps, length)):
            if nx:
                dx[:, :length - j, :] += g[:, j:, :, :] @ kd[:, j]
            if nkg:
                dk[:, j] = np.einsum("blem,ble->m", g[:, j:, :, :],
                                     xd[:, :length - j, :])
        return dx, dk

    return _from_op(out, "causal_conv_bank", (x, kernels), grad_fn)


def channel_mix(tf: Tensor, weights: Tensor) -> Tensor:
    """Weighted sum over the channel axis of a [M, L] decomposition.

    Channels are accumulated in ascending order, matching the naive loop
    bit for bit.
    """
    if tf.ndim != 2 or weights.ndim != 1 or tf.shape[0] != weights.shape[0]:
        raise ValueError("channel_mix expects tf[M,L] and weights[M]")
    td, wd = tf.data, weights.data
    out = np.zeros(td.shape[1], dtype=td.dtype)
    for k in range(td.shape[0]):
        out += wd[k] * td[k]

    def grad_fn(g):
        dtf = wd[:, None] * g[None, :]
        dw = td @ g
        return dtf, dw

    return _from_op(out, "channel_mix", (tf, weights), grad_fn)


def token_mix(tf: Tensor, weights: Tensor) -> Tensor:
    """Per-token weighted channel sum: out[t] = sum_k weights[t, k] * tf[k, t]."""
    if tf.ndim != 2 or weights.ndim != 2 or tf.shape != weights.shape[::-1]:
        raise ValueError("token_mix expects tf[M,L] and weights[L,M]")
    td, wd = tf.data, weights.data
    out = np.zeros(td.shape[1], dtype=td.dtype)
    for k in range(td.shape[0]):
        out += wd[:, k] * td[k]

    def grad_fn(g):
        dtf = wd.T * g[None, :]
        dw = (td * g[None, :]).T
        return dtf, dw

    return _from_op(out, "token_mix", (tf, weights), grad_fn)


# ---------------------------------------------------------------------------
# losses


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood in nats over all positions.

    logits is [..., V]; targets is an integer array of shape logits.shape[:-1].
    """
    targets = np.asarray(targets)
    vocab = logits.shape[-1]
    if targets.shape != logits.shape[:-1]:
        raise ValueError("targets shape must match logits leading dimensions")
    if targets.size and (targets.min() < 0 or targets.max() >= vocab):
        raise ValueError("target id out of range")
    z = logits.data.reshape(-1, vocab)
    t = targets.reshape(-1)
    m = z.max(axis=1, keepdims=True)
    lse = m + np.log(np.exp(z - m).sum(axis=1, keepdims=True))
    nll = lse[:, 0] - z[np.arange(z.shape[0]), t]

    def grad_fn(g):
        p = np.exp(z - lse)
        p[np.arange(z.shape[0]), t] -= 1.0
        return ((float(g) / z.shape[0]) * p.reshape(logits.shape),)

    return _from_op(np.asarray(nll.mean()), "cross_entropy", (logits,), grad_fn)


def huber(pred: Tensor, target: np.ndarray, delta: float = 1.0) -> Tensor:
    """Mean Huber loss against a fixed target array."""
    target = np.asarray(target, dtype=pred.dtype)
    if target.shape != pred.shape:
        raise ValueError("target shape must match prediction shape")
    d = pred.data - target
    small = np.abs(d) <= delta
    loss = np.where(small, 0.5 * d * d, delta * (np.abs(d) - 0.5 * delta))

    def grad_fn(g):
        dd = np.where(small, d, delta * np.sign(d))
        return ((float(g) / pred.size) * dd,)

    return _from_op(np.asarray(loss.mean()), "huber", (pred,), grad_fn)


# ---------------------------------------------------------------------------
# backward pass


def _toposort(root: Tensor):
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        t, done = stack.pop()
        if done:
            order.append(t)
            continue
        if id(t) in visited:
            continue
        visited.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for inp in t.node.inputs:
                if inp.requires_grad and id(inp) not in visited:
                    stack.append((inp, False))
    return order


def backward(loss: Tensor) -> None:
    """Propagate gradients from a scalar loss to every reachable tensor.

    Each tape node is visited exactly once, in reverse topological order,
    and is then dismantled: its closure, its input references, and the
    intermediate's own grad buffer are released on the spot, so activation
    memory drains as the walk proceeds instead of doubling at the end.
    Leaf tensors (no tape node) keep their accumulated grads. Calling
    backward twice on the same graph raises.
    """
    if loss.data.size != 1:
        raise ValueError("backward requires a scalar loss")
    if loss.node is None:
        warnings.warn("backward on a tensor with no tape attached; nothing to do")
        return
    if loss.node.grad_fn is None:
        raise RuntimeError("backward already ran on this graph")
    order = _toposort(loss)
    loss.grad = np.ones_like(loss.data)
    while order:
        t = order.pop()
        node = t.node
        if node is None:
            continue
        grads = node.grad_fn(t.grad)
        for inp, g in zip(node.inputs, grads):
            if g is None or not inp.requires_grad:
                continue
            inp.grad = g if inp.grad is None else inp.grad + g
        node.grad_fn = None
        node.inputs = ()
        t.grad = None


def grad_check(f, x: Tensor, eps: float = 1e-5) -> float:
    """Compare analytic gradients of a scalar-valued f against central differences.

    Returns max over coordinates of |analytic - numeric| / max(|analytic|,
    |numeric|, 1e-12).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x.requires_grad = True
    x.grad = None
    y = f(x)
    if y.data.size != 1:
        raise ValueError("grad_check requires a scalar-valued function")
    if not np.isfinite(y.data):
        raise FloatingPointError("non-finite function value in grad_check")
    backward(y)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()

    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    nflat = numeric.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = float(f(x).data)
            flat[i] = orig - eps
            down = float(f(x).data)
            flat[i] = orig
            nflat[i] = (up - down) / (2.0 * eps)
    if not np.all(np.isfinite(numeric)):
        raise FloatingPointError("non-finite numeric gradient in grad_check")
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-12)
    return float((np.abs(analytic - numeric) / denom).max())
