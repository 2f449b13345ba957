"""Reverse-mode differentiation over numpy arrays.

Graphs are built eagerly during the forward pass: every op returns a new
:class:`Tensor` that remembers its inputs and a closure mapping the output
gradient to input gradients. :func:`grad` walks the graph once in reverse
topological order. Only tensors with ``requires_grad`` set take part, so
frozen weights cost nothing beyond the forward matmuls.

Broadcasting is deliberately narrow: a binary op accepts two equal shapes,
a scalar, or a second operand whose shape is a trailing suffix of the first
(``[B, T, d] + [d]``, ``[B, T, d] + [T, d]``).
"""
from __future__ import annotations

import contextlib
import zlib

import numpy as np
from scipy.special import erf

from .errors import ContractError

_PRECISIONS = {"f32": np.float32, "f64": np.float64}
_dtype = np.float32


def get_dtype():
    return _dtype


def set_precision(name):
    """Set the dtype used for newly created leaf tensors ("f32" or "f64")."""
    global _dtype
    try:
        _dtype = _PRECISIONS[name]
    except KeyError:
        raise ContractError(f"unknown precision {name!r}; expected one of {sorted(_PRECISIONS)}")


@contextlib.contextmanager
def precision(name):
    previous = _dtype
    set_precision(name)
    try:
        yield
    finally:
        globals()["_dtype"] = previous


class Tensor:
    """An n-dimensional array that may participate in a differentiation graph."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, *, _parents=(), _backward=None, op="leaf"):
        arr = np.asarray(data)
        if not _parents and arr.dtype != _dtype:
            arr = arr.astype(_dtype)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward
        self.op = op

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

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __len__(self):
        return len(self.data)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ContractError("division is only supported by constants")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def _as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return _raw(np.asarray(x, dtype=dtype if dtype is not None else _dtype), "const")


def _node(data, parents, backward, op):
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, _parents=parents, _backward=backward, op=op)
    return _raw(data, op)


def _raw(data, op):
    t = Tensor.__new__(Tensor)
    t.data = data
    t.grad = None
    t.requires_grad = False
    t._parents = ()
    t._backward = None
    t.op = op
    return t


def _check_broadcast(a_shape, b_shape, op):
    if a_shape == b_shape or len(b_shape) == 0 or len(a_shape) == 0:
        return
    short, long_ = (b_shape, a_shape) if len(b_shape) <= len(a_shape) else (a_shape, b_shape)
    if long_[len(long_) - len(short):] != short:
        raise ContractError(f"{op}: shapes {a_shape} and {b_shape} are not trailing-axis compatible")


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum(), dtype=g.dtype)
    lead = g.ndim - len(shape)
    return g.reshape((-1,) + shape).sum(axis=0) if lead > 0 else g


# ---------------------------------------------------------------- graph walk


def _toposort(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, finished = stack.pop()
        if finished:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def grad(output, wrt, grad_output=None):
    """Gradients of ``output`` with respect to each tensor in ``wrt``.

    Tensors in ``wrt`` that do not influence ``output`` get a zero array.
    When ``grad_output`` is omitted ``output`` must be a scalar.
    """
    if grad_output is None:
        if output.size != 1:
            raise ContractError(f"gradient of a non-scalar output {output.shape} needs grad_output")
        grad_output = np.ones_like(output.data)
    wanted = {id(t) for t in wrt}
    grads = {}
    if output.requires_grad:
        grads[id(output)] = np.asarray(grad_output, dtype=output.dtype)
        for node in reversed(_toposort(output)):
            g = grads.get(id(node))
            if g is None or node._backward is None:
                continue
            if id(node) not in wanted:
                del grads[id(node)]
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
    return [grads.get(id(t), np.zeros_like(t.data)) for t in wrt]


def backward(loss, params=None):
    """Differentiate a scalar loss; return ``{parameter name: gradient}``.

    ``params`` defaults to every trainable parameter reachable from ``loss``.
    Each leaf's ``.grad`` is overwritten with its gradient.
    """
    if loss.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if params is None:
        params = [n for n in _toposort(loss) if hasattr(n, "trainable") and n.requires_grad] if loss.requires_grad else []
    params = list(params)
    grads = grad(loss, params)
    for p, g in zip(params, grads):
        p.grad = g
    return {getattr(p, "name", str(i)): g for i, (p, g) in enumerate(zip(params, grads))}


# ---------------------------------------------------------------- elementwise


def add(a, b):
    a = _as_tensor(a, getattr(b, "dtype", None))
    b = _as_tensor(b, a.dtype)
    _check_broadcast(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape

    def back(g):
        return (_unbroadcast(g, sa) if a.requires_grad else None,
                _unbroadcast(g, sb) if b.requires_grad else None)

    return _node(a.data + b.data, (a, b), back, "add")


def sub(a, b):
    a = _as_tensor(a, getattr(b, "dtype", None))
    b = _as_tensor(b, a.dtype)
    _check_broadcast(a.shape, b.shape, "sub")
    sa, sb = a.shape, b.shape

    def back(g):
        return (_unbroadcast(g, sa) if a.requires_grad else None,
                -_unbroadcast(g, sb) if b.requires_grad else None)

    return _node(a.data - b.data, (a, b), back, "sub")


def mul(a, b):
    a = _as_tensor(a, getattr(b, "dtype", None))
    b = _as_tensor(b, a.dtype)
    _check_broadcast(a.shape, b.shape, "mul")

    def back(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return _node(a.data * b.data, (a, b), back, "mul")


def square(x):
    return mul(x, x)


def exp(x):
    out = np.exp(x.data)
    return _node(out, (x,), lambda g: (g * out,), "exp")


def log(x):
    return _node(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def tanh(x):
    out = np.tanh(x.data)
    return _node(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(x):
    mask = x.data > 0
    return _node(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x):
    """Exact (erf-based) GELU."""
    cdf = erf(x.data * _INV_SQRT2)
    cdf += 1.0
    cdf *= 0.5
    out = (x.data * cdf).astype(x.dtype, copy=False)

    def back(g):
        # d/dx = cdf + x * pdf, built in one buffer
        t = x.data * x.data
        t *= -0.5
        np.exp(t, out=t)
        t *= _INV_SQRT2PI
        t *= x.data
        t += cdf
        t *= g
        return (t.astype(x.dtype, copy=False),)

    return _node(out, (x,), back, "gelu")


def identity(x):
    return x


# ---------------------------------------------------------------- shape ops


def reshape(x, shape):
    src = x.shape
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x, axes=None):
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inverse = tuple(np.argsort(axes))
    return _node(x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),), "transpose")


def swapaxes(x, a1, a2):
    axes = list(range(x.ndim))
    axes[a1], axes[a2] = axes[a2], axes[a1]
    return transpose(x, tuple(axes))


def _is_basic_index(index):
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, type(Ellipsis))) or i is None for i in items)


def getitem(x, index):
    src_shape, dtype = x.shape, x.dtype
    basic = _is_basic_index(index)

    def back(g):
        out = np.zeros(src_shape, dtype=dtype)
        if basic:
            out[index] = g
        else:
            np.add.at(out, index, g)
        return (out,)

    return _node(x.data[index], (x,), back, "getitem")


def tsum(x, axis=None, keepdims=False):
    src = x.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).astype(x.dtype, copy=True),)

    return _node(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), back, "sum")


def mean(x, axis=None, keepdims=False):
    count = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(tsum(x, axis, keepdims), 1.0 / count)


# ---------------------------------------------------------------- linear algebra


def matmul(a, b):
    """``a @ b`` where ``b`` is a 2-d weight or shares ``a``'s leading axes."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ContractError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ContractError(f"matmul: leading axes differ {a.shape} @ {b.shape}")

    def back(g):
        ga = gb = None
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            if ga.shape != a.shape:
                ga = _unbroadcast(ga, a.shape)
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _node(a.data @ b.data, (a, b), back, "matmul")


def linear(x, weight, bias=None):
    """``x @ weight + bias`` with ``weight`` of shape [in, out]."""
    if x.shape[-1] != weight.shape[0]:
        raise ContractError(f"linear: input dim {x.shape[-1]} != weight rows {weight.shape[0]}")
    out = x.data @ weight.data
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def back(g):
        gx = g @ weight.data.T if x.requires_grad else None
        gw = x.data.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1]) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        gbias = g.reshape(-1, g.shape[-1]).sum(axis=0) if bias.requires_grad else None
        return gx, gw, gbias

    return _node(out, parents, back, "linear")


# ---------------------------------------------------------------- fused kernels


def softmax(x, axis=-1, mask=None):
    """Numerically stable softmax; ``mask`` (bool, True = keep) is broadcast over ``x``."""
    if np.isnan(x.data).any():
        raise ContractError("softmax input contains NaN")
    z = x.data if mask is None else np.where(mask, x.data, -np.inf)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _node(p, (x,), back, "softmax")


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalise the last axis to zero mean and unit (population) variance, then scale and shift."""
    d = x.shape[-1] if x.ndim else 0
    if d == 0:
        raise ContractError("layer_norm needs a non-empty last axis")
    if eps <= 0:
        raise ContractError("layer_norm eps must be positive")
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ContractError(f"layer_norm affine params must have shape ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    rstd = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * rstd
    out = xhat * gamma.data + beta.data

    def back(g):
        gx = gg = gb = None
        if x.requires_grad:
            dxhat = g * gamma.data
            gx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                         - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        if gamma.requires_grad:
            gg = (g * xhat).reshape(-1, d).sum(axis=0)
        if beta.requires_grad:
            gb = g.reshape(-1, d).sum(axis=0)
        return gx, gg, gb

    return _node(out, (x, gamma, beta), back, "layer_norm")


def log_softmax_np(logits, axis=-1):
    z = logits - logits.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def cross_entropy(logits, labels, reduction="mean"):
    """Softmax cross-entropy of ``logits[B, K]`` against integer ``labels[B]``."""
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ContractError(f"cross_entropy expects logits [B, K] and labels [B], got {logits.shape}, {labels.shape}")
    k = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ContractError(f"labels must lie in [0, {k})")
    logp = log_softmax_np(logits.data)
    rows = np.arange(len(labels))
    losses = -logp[rows, labels]
    if reduction == "mean":
        scale = 1.0 / max(len(labels), 1)
        out = np.asarray(losses.mean(), dtype=logits.dtype)
    elif reduction == "sum":
        scale = 1.0
        out = np.asarray(losses.sum(), dtype=logits.dtype)
    else:
        raise ContractError(f"unknown reduction {reduction!r}")

    def back(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return ((p * (g * scale)).astype(logits.dtype),)

    return _node(out, (logits,), back, "cross_entropy")


def mse(pred, target):
    diff = sub(pred, target)
    return mean(mul(diff, diff))


# ---------------------------------------------------------------- verification


def grad_check(f, params, h=1e-5, atol=1e-6):
    """Largest coordinate-wise relative error between :func:`grad` and central differences.

    ``f`` is a zero-argument callable returning a scalar tensor built from
    ``params``. Relative error is ``|a - n| / max(|a|, |n|, atol)``; the floor
    keeps coordinates with (near-)zero gradient from dividing by zero.
    """
    if not 1e-6 <= h <= 1e-4:
        raise ContractError("grad_check step h must lie in [1e-6, 1e-4]")
    if any(p.dtype != np.float64 for p in params):
        raise ContractError("grad_check requires 64-bit parameters")
    analytic = grad(f(), params)
    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = float(f().data)
            flat[i] = orig - h
            down = float(f().data)
            flat[i] = orig
            numeric = (up - down) / (2 * h)
            ai = float(a.reshape(-1)[i])
            err = abs(ai - numeric) / max(abs(ai), abs(numeric), atol)
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------- randomness


def _stream_key(part):
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFF
    return zlib.crc32(str(part).encode("utf-8"))


class Rng:
    """Seeded Philox-4x64 generator with independent named child streams.

    ``Rng(42).stream("init")`` and ``Rng(42).stream("attack")`` never share
    draws. The state is derived through numpy's ``SeedSequence`` from the
    64-bit seed and the CRC-32 of every stream name, so a (seed, path) pair
    reproduces the same sequence on every platform.
    """

    def __init__(self, seed, path=()):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.path = tuple(path)
        entropy = [self.seed & 0xFFFFFFFF, self.seed >> 32] + [_stream_key(p) for p in self.path]
        self.gen = np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))

    def stream(self, *names):
        return Rng(self.seed, self.path + names)

    def random(self, size=None):
        return self.gen.random(size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.gen.normal(loc, scale, size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        """Integers in ``[low, high]`` inclusive (or ``[0, low]`` when ``high`` is None)."""
        if high is None:
            low, high = 0, low
        return self.gen.integers(low, high, size=size, endpoint=True)

    def permutation(self, n):
        """Stable argsort of ``n`` uniform keys: the documented shuffle used by every sampler."""
        return np.argsort(self.gen.random(n), kind="stable")

    def __repr__(self):
        return f"Rng(seed={self.seed}, path={self.path})"
