"""A small reverse-mode differentiation core over numpy arrays.

Only the operations the ranking model needs are provided. Every op accepts
optional leading batch axes and works on the trailing one or two axes, so a
whole mini-batch of description/code pairs runs through one graph.

Recording order is the creation order of tensors (a global counter);
:meth:`Tensor.backward` visits the reachable nodes in exactly the reverse of
that order and accumulates into ``.grad``.
"""
from __future__ import annotations

import contextlib
import itertools
import threading

import numpy as np

DEFAULT_DTYPE = np.float32

_counter = itertools.count()
_state = threading.local()


def grad_enabled():
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    previous = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = previous


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_seq")

    def __init__(self, data, requires_grad=False, name=None, dtype=None, _parents=()):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE if dtype is None else dtype)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self.name = name
        self._parents = _parents if self.requires_grad else ()
        self._backward = None
        self._seq = next(_counter)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if not self.requires_grad:
            return
        g = np.asarray(g, dtype=self.data.dtype)
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def backward(self, grad=None):
        """Run reverse-mode accumulation from this tensor.

        ``grad`` defaults to ones, which is the usual seed for a scalar loss.
        """
        if grad is None:
            grad = np.ones_like(self.data)
        nodes = []
        seen = set()
        stack = [self]
        while stack:
            node = stack.pop()
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            nodes.append(node)
            stack.extend(node._parents)
        nodes.sort(key=lambda t: t._seq, reverse=True)
        self._accumulate(grad)
        for node in nodes:
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
        for node in nodes:
            if node._parents:
                # intermediates do not keep their gradient around
                node.grad = None
        return self

    # sugar
    def __add__(self, other):
        return add(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _result(data, parents, backward):
    if not grad_enabled():
        return Tensor(data)
    out = Tensor(data, _parents=tuple(parents))
    if out.requires_grad:
        out._backward = backward
    return out


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b):
    """Matrix product over the last two axes (leading axes broadcast)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out_data = np.matmul(a.data, b.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape))

    return _result(out_data, (a, b), backward)


def transpose(x):
    """Swap the last two axes."""
    x = as_tensor(x)

    def backward(g):
        x._accumulate(np.swapaxes(g, -1, -2))

    return _result(np.swapaxes(x.data, -1, -2), (x,), backward)


def reshape(x, shape):
    x = as_tensor(x)

    def backward(g):
        x._accumulate(g.reshape(x.shape))

    return _result(x.data.reshape(shape), (x,), backward)


def add(a, b):
    a, b = as_tensor(a, dtype=getattr(b, "dtype", None)), as_tensor(b)
    out_data = a.data + b.data

    def backward(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(g, b.shape))

    return _result(out_data, (a, b), backward)


def mul_const(x, c):
    """Multiply by a constant array (no gradient flows into ``c``)."""
    x = as_tensor(x)
    c = np.asarray(c, dtype=x.dtype)
    out_data = x.data * c

    def backward(g):
        x._accumulate(_unbroadcast(g * c, x.shape))

    return _result(out_data, (x,), backward)


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat of an empty list")
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                index = [slice(None)] * g.ndim
                index[axis] = slice(lo, hi)
                t._accumulate(g[tuple(index)])

    return _result(out_data, tensors, backward)


def embedding_lookup(table, ids):
    """Gather rows of ``table`` (V x d) for an integer array ``ids``."""
    table = as_tensor(table)
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise TypeError(f"embedding ids must be integers, got {ids.dtype}")
    vocab = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise IndexError(f"embedding id out of range [0, {vocab}): min={ids.min()} max={ids.max()}")

    def backward(g):
        dt = np.zeros_like(table.data)
        np.add.at(dt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        table._accumulate(dt)

    return _result(table.data[ids], (table,), backward)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def tanh(x):
    """Hyperbolic tangent kept strictly inside (-1, 1).

    In float32, tanh rounds to exactly +-1 once |x| exceeds about 9; the
    output is clamped one ulp inside the interval so it stays open.
    """
    x = as_tensor(x)
    edge = np.nextafter(x.dtype.type(1), x.dtype.type(0))
    y = np.clip(np.tanh(x.data), -edge, edge)

    def backward(g):
        x._accumulate(g * (1.0 - y * y))

    return _result(y, (x,), backward)


def relu(x):
    x = as_tensor(x)
    positive = x.data > 0
    y = np.where(positive, x.data, 0).astype(x.dtype)

    def backward(g):
        x._accumulate(g * positive)

    return _result(y, (x,), backward)


def dropout(x, p, train, rng=None):
    """Inverted dropout; identity when not training or when ``p == 0``."""
    x = as_tensor(x)
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {p}")
    if not train or p == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an explicit rng")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / x.dtype.type(1.0 - p)
    return mul_const(x, keep)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _im2col(x, width):
    """Stack the ``width`` same-padded shifted copies along the feature axis."""
    L = x.shape[-2]
    left = (width - 1) // 2
    right = width - 1 - left
    pad = [(0, 0)] * (x.ndim - 2) + [(left, right), (0, 0)]
    xp = np.pad(x, pad)
    return np.concatenate([xp[..., k:k + L, :] for k in range(width)], axis=-1)


def conv1d_linear(x, filters, bias):
    """Same-length 1-D convolution without activation.

    ``x`` is (..., L, d_in); ``filters`` is (h, d_in, d_out) where
    ``filters[k]`` multiplies the row at offset ``k - (h-1)//2``; rows
    outside ``[0, L)`` are zeros.
    """
    x, filters, bias = as_tensor(x), as_tensor(filters), as_tensor(bias)
    if filters.ndim != 3:
        raise ValueError(f"filters must be (h, d_in, d_out), got {filters.shape}")
    width, d_in, d_out = filters.shape
    if width < 1 or width > 3:
        raise ValueError(f"convolution width must be 1, 2 or 3, got {width}")
    if x.shape[-1] != d_in:
        raise ValueError(f"conv input width {x.shape[-1]} does not match filters {filters.shape}")
    if bias.shape != (d_out,):
        raise ValueError(f"bias shape {bias.shape} does not match {d_out} filters")
    L = x.shape[-2]
    if L < 1:
        raise ValueError("convolution over an empty sequence")
    cols = _im2col(x.data, width)
    flat_cols = cols.reshape(-1, width * d_in)
    w2 = filters.data.reshape(width * d_in, d_out)
    out = (flat_cols @ w2).reshape(x.shape[:-1] + (d_out,)) + bias.data

    def backward(g):
        g2 = g.reshape(-1, d_out)
        if filters.requires_grad:
            filters._accumulate((flat_cols.T @ g2).reshape(filters.shape))
        if bias.requires_grad:
            bias._accumulate(g2.sum(axis=0))
        if x.requires_grad:
            dcols = (g2 @ w2.T).reshape(x.shape[:-1] + (width * d_in,))
            left = (width - 1) // 2
            dx = np.zeros_like(x.data)
            for k in range(width):
                shift = k - left
                piece = dcols[..., k * d_in:(k + 1) * d_in]
                # output row i read input row i + shift
                lo, hi = max(0, -shift), min(L, L - shift)
                if lo < hi:
                    dx[..., lo + shift:hi + shift, :] += piece[..., lo:hi, :]
            x._accumulate(dx)

    return _result(out, (x, filters, bias), backward)


def conv1d_same(x, filters, bias, activation="tanh"):
    """Same-padded convolution followed by ``activation`` (``"tanh"`` or None)."""
    out = conv1d_linear(x, filters, bias)
    if activation is None:
        return out
    if activation == "tanh":
        return tanh(out)
    if activation == "relu":
        return relu(out)
    raise ValueError(f"unknown activation {activation!r}")


# ---------------------------------------------------------------------------
# normalisation and pooling
# ---------------------------------------------------------------------------

def _mask_array(mask, shape):
    if mask is None:
        return None
    m = np.broadcast_to(np.asarray(mask, dtype=bool), shape)
    return m


def softmax_rows(x, mask=None):
    """Softmax over the last axis; masked entries come out exactly zero."""
    x = as_tensor(x)
    m = _mask_array(mask, x.shape)
    if m is not None:
        if not np.all(m.any(axis=-1)):
            raise ValueError("softmax over a fully masked row")
        z = np.where(m, x.data, -np.inf)
    else:
        z = x.data
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    if m is not None:
        y = np.where(m, y, 0).astype(x.dtype)

    def backward(g):
        x._accumulate(y * (g - (g * y).sum(axis=-1, keepdims=True)))

    return _result(y, (x,), backward)


def max_pool(x, axis, mask=None):
    """Max over ``axis`` ignoring masked entries; ties go to the lowest index."""
    x = as_tensor(x)
    m = _mask_array(mask, x.shape)
    if x.shape[axis] == 0:
        raise ValueError("max pooling over an empty slice")
    if m is not None:
        if not np.all(m.any(axis=axis)):
            raise ValueError("max pooling over a fully masked slice")
        z = np.where(m, x.data, -np.inf)
    else:
        z = x.data
    idx = np.argmax(z, axis=axis)
    out = np.take_along_axis(x.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

    def backward(g):
        dx = np.zeros_like(x.data)
        np.put_along_axis(dx, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        x._accumulate(dx)

    return _result(out, (x,), backward)


def mean_pool(x, axis, mask=None):
    """Mean over ``axis`` counting unmasked entries only."""
    x = as_tensor(x)
    m = _mask_array(mask, x.shape)
    if x.shape[axis] == 0:
        raise ValueError("mean pooling over an empty slice")
    if m is None:
        weights = np.full(x.shape, 1.0 / x.shape[axis], dtype=x.dtype)
    else:
        count = m.sum(axis=axis, keepdims=True)
        if np.any(count == 0):
            raise ValueError("mean pooling over a fully masked slice")
        weights = (m / count).astype(x.dtype)
    out = (x.data * weights).sum(axis=axis)

    def backward(g):
        x._accumulate(np.expand_dims(g, axis) * weights)

    return _result(out, (x,), backward)


def pool_max_cols(x, mask=None):
    """Max over rows for each column: (..., m, n) -> (..., n)."""
    return max_pool(x, axis=-2, mask=mask)


def pool_mean_cols(x, mask=None):
    """Mean over rows for each column: (..., m, n) -> (..., n)."""
    return mean_pool(x, axis=-2, mask=mask)


def pool_max_rows(x, mask=None):
    """Max over columns for each row: (..., m, n) -> (..., m)."""
    return max_pool(x, axis=-1, mask=mask)


def pool_mean_rows(x, mask=None):
    return mean_pool(x, axis=-1, mask=mask)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def cross_entropy(logits, labels):
    """Mean two-class cross-entropy of ``logits`` (..., 2) against 0/1 labels."""
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    if logits.shape[-1] != 2:
        raise ValueError(f"expected two-class logits, got shape {logits.shape}")
    if labels.shape != logits.shape[:-1]:
        raise ValueError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    if not np.all((labels == 0) | (labels == 1)):
        raise ValueError("labels must be 0 or 1")
    labels = labels.astype(np.int64)
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - logsum
    picked = np.take_along_axis(logp, labels[..., None], axis=-1)[..., 0]
    count = max(1, picked.size)
    loss = np.asarray(-picked.sum() / count, dtype=logits.dtype)
    probs = np.exp(logp)
    onehot = np.zeros_like(probs)
    np.put_along_axis(onehot, labels[..., None], 1.0, axis=-1)

    def backward(g):
        logits._accumulate(g * (probs - onehot) / count)

    return _result(loss, (logits,), backward)


def softmax_probs(logits):
    """Plain (non-differentiable) softmax over the last axis."""
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# optimiser
# ---------------------------------------------------------------------------

class Adam:
    """Adam with bias correction over a name -> Tensor parameter mapping."""

    def __init__(self, params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = dict(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        for name, p in self.params.items():
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            step = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data -= step.astype(p.dtype)

    def state_dict(self):
        return {"t": self.t, "m": {k: v.copy() for k, v in self.m.items()},
                "v": {k: v.copy() for k, v in self.v.items()}}


def adam_step(params, grads, state, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
    """Functional Adam update on plain arrays.

    ``state`` holds ``"t"``, ``"m"`` and ``"v"`` (dicts keyed like ``params``);
    returns new ``(params, state)`` without mutating the inputs.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
    t = state["t"] + 1
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        m = beta1 * state["m"][name] + (1.0 - beta1) * g
        v = beta2 * state["v"][name] + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        new_params[name] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
        new_m[name], new_v[name] = m, v
    return new_params, {"t": t, "m": new_m, "v": new_v}


def numerical_grad(f, x, h=1e-5, index=None):
    """Central finite difference of scalar ``f()`` w.r.t. array ``x`` in place.

    When ``index`` is given only those flat positions are probed.
    """
    flat = x.reshape(-1)
    positions = range(flat.size) if index is None else index
    out = np.zeros(len(positions) if index is not None else flat.size)
    for k, i in enumerate(positions):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f())
        flat[i] = orig - h
        fm = float(f())
        flat[i] = orig
        out[k] = (fp - fm) / (2 * h)
    return out


__all__ = [
    "Tensor", "as_tensor", "no_grad", "grad_enabled", "matmul", "transpose", "reshape", "add", "mul_const",
    "concat", "embedding_lookup", "tanh", "relu", "dropout", "conv1d_linear",
    "conv1d_same", "softmax_rows", "max_pool", "mean_pool", "pool_max_cols",
    "pool_mean_cols", "pool_max_rows", "pool_mean_rows", "cross_entropy",
    "softmax_probs", "Adam", "adam_step", "numerical_grad", "DEFAULT_DTYPE",
]
