"""Reverse-mode automatic differentiation over dense numpy arrays.

The tape is define-by-run: every operation records its parents and a closure
that pushes the incoming gradient back to them.  The primitive set is exactly
what the sequence model needs (matmul, broadcast arithmetic, GELU, tanh,
softmax variants, layer norm, gathers, slicing, reductions, the asymmetric
expectile penalty) and nothing else.

Arrays are float32 on production paths and float64 when gradients are being
verified against finite differences; an op never mixes the two.  Every op
output is checked for NaN/Inf and raises :class:`NumericFault` naming the
offending node.
"""

from __future__ import annotations

import math

import numpy as np

_FLOATS = (np.float32, np.float64)

_GELU_C = math.sqrt(2.0 / math.pi)


class NumericFault(ArithmeticError):
    """A non-finite value appeared at the named op node."""

    def __init__(self, op: str):
        super().__init__(f"non-finite value produced by op '{op}'")
        self.op = op


def _as_float_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data, dtype=dtype)
    if arr.dtype not in _FLOATS:
        arr = arr.astype(np.float32)
    return arr


class Tensor:
    """A dense array plus the tape bookkeeping needed for backward()."""

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None, op: str = "leaf"):
        self.data = _as_float_array(data, dtype)
        if not np.all(np.isfinite(self.data)):
            raise NumericFault(op)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = op
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.data.shape}, dtype={self.data.dtype})"

    def backward(self):
        """Accumulate d(self)/d(leaf) into .grad for every reachable leaf."""
        if self.data.size != 1:
            raise ValueError("backward() is only defined for scalar losses")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, -_wrap(other, self.dtype))

    def __rsub__(self, other):
        return add(_wrap(other, self.dtype), -self)

    def __truediv__(self, other):
        return div(self, other)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take_slice(self, key)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)


def _wrap(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward, op: str) -> Tensor:
    """Build an op output node; prune the tape below constant subgraphs."""
    if not np.all(np.isfinite(data)):
        raise NumericFault(op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    needs = any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = parents
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _accum(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g if g.flags.owndata else g.copy()
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to `shape` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_dtypes(a: Tensor, b: Tensor, op: str):
    if a.dtype != b.dtype:
        raise ValueError(f"{op}: mixed dtypes {a.dtype} and {b.dtype}")


# -- arithmetic ---------------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    b = _wrap(b, a.dtype)
    _check_dtypes(a, b, "add")
    out_data = a.data + b.data

    def backward(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _make(out_data, (a, b), backward, "add")


def mul(a: Tensor, b) -> Tensor:
    b = _wrap(b, a.dtype)
    _check_dtypes(a, b, "mul")
    out_data = a.data * b.data

    def backward(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(out_data, (a, b), backward, "mul")


def div(a: Tensor, b) -> Tensor:
    b = _wrap(b, a.dtype)
    _check_dtypes(a, b, "div")
    out_data = a.data / b.data

    def backward(g):
        _accum(a, _unbroadcast(g / b.data, a.data.shape))
        _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(out_data, (a, b), backward, "div")


def power(a: Tensor, p: float) -> Tensor:
    p = float(p)
    out_data = a.data**p

    def backward(g):
        _accum(a, g * p * a.data ** (p - 1.0))

    return _make(out_data, (a,), backward, "power")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy-style broadcasting over leading axes."""
    _check_dtypes(a, b, "matmul")
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError("matmul requires operands with ndim >= 2")
    out_data = a.data @ b.data

    def backward(g):
        _accum(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape))
        _accum(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape))

    return _make(out_data, (a, b), backward, "matmul")


# -- shape ops ----------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    out_data = a.data.reshape(shape)

    def backward(g):
        _accum(a, g.reshape(a.data.shape))

    return _make(out_data, (a,), backward, "reshape")


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out_data = a.data.transpose(axes)

    def backward(g):
        _accum(a, g.transpose(inv))

    return _make(out_data, (a,), backward, "transpose")


def concat(parts: list[Tensor], axis: int) -> Tensor:
    for p in parts[1:]:
        _check_dtypes(parts[0], p, "concat")
    out_data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for p, piece in zip(parts, np.split(g, splits, axis=axis)):
            _accum(p, piece)

    return _make(out_data, tuple(parts), backward, "concat")


def take_slice(a: Tensor, key) -> Tensor:
    """Basic (non-fancy) indexing; each input element appears at most once."""
    out_data = a.data[key]
    if out_data.base is not None:
        out_data = out_data.copy()

    def backward(g):
        full = np.zeros_like(a.data)
        full[key] = g
        _accum(a, full)

    return _make(out_data, (a,), backward, "slice")


# -- reductions ---------------------------------------------------------------


def reduce_sum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.data.shape).astype(a.dtype, copy=True))
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.data.shape).astype(a.dtype, copy=True))

    return _make(out_data, (a,), backward, "sum")


def reduce_mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    if axis is None:
        count = a.data.size
    else:
        count = a.data.shape[axis]
    return mul(reduce_sum(a, axis, keepdims), 1.0 / count)


# -- nonlinearities -----------------------------------------------------------


def tanh(a: Tensor) -> Tensor:
    out_data = np.tanh(a.data)

    def backward(g):
        _accum(a, g * (1.0 - out_data * out_data))

    return _make(out_data, (a,), backward, "tanh")


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation (fixed variant so gradients are reproducible)."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out_data = 0.5 * x * (1.0 + t)

    def backward(g):
        d_inner = _GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
        local = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
        _accum(a, g * local)

    return _make(out_data, (a,), backward, "gelu")


# -- softmax family -----------------------------------------------------------


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        _accum(a, out_data * (g - dot))

    return _make(out_data, (a,), backward, "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    m = a.data.max(axis=axis, keepdims=True)
    shifted = a.data - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out_data = shifted - lse
    probs = np.exp(out_data)

    def backward(g):
        _accum(a, g - probs * g.sum(axis=axis, keepdims=True))

    return _make(out_data, (a,), backward, "log_softmax")


def masked_softmax(a: Tensor, mask: np.ndarray, axis: int = -1) -> Tensor:
    """Softmax over the entries where mask is True; masked entries are exactly 0.

    Output and gradient are independent of the values at masked positions, which
    is what makes attention-mask invariants exact rather than approximate.
    """
    mask = np.broadcast_to(mask, a.data.shape)
    if not mask.any(axis=axis).all():
        raise ValueError("masked_softmax: some row has no unmasked entry")
    neg = np.array(-np.inf)
    m = np.max(np.where(mask, a.data, neg), axis=axis, keepdims=True)
    shifted = np.where(mask, a.data - m, 0.0)
    e = np.where(mask, np.exp(np.minimum(shifted, 0.0)), 0.0)
    out_data = (e / e.sum(axis=axis, keepdims=True)).astype(a.dtype)

    def backward(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        _accum(a, out_data * (g - dot))

    return _make(out_data, (a,), backward, "masked_softmax")


# -- layer norm ---------------------------------------------------------------


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    _check_dtypes(a, gain, "layer_norm")
    _check_dtypes(a, bias, "layer_norm")
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    out_data = xhat * gain.data + bias.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        _accum(gain, (g * xhat).sum(axis=lead))
        _accum(bias, g.sum(axis=lead))
        dxhat = g * gain.data
        n = x.shape[-1]
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        _accum(a, dx)

    return _make(out_data, (a, gain, bias), backward, "layer_norm")


# -- gathers ------------------------------------------------------------------


def embedding(table: Tensor, idx: np.ndarray) -> Tensor:
    """Row gather: out[...] = table[idx[...]]."""
    idx = np.asarray(idx)
    out_data = table.data[idx]

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx, g)
        _accum(table, full)

    return _make(out_data, (table,), backward, "embedding")


def take_along_last(a: Tensor, idx: np.ndarray) -> Tensor:
    """out[...] = a[..., idx[...]]; one pick per row of the last axis."""
    idx = np.asarray(idx)
    picked = np.take_along_axis(a.data, idx[..., None], axis=-1)
    out_data = picked[..., 0]

    def backward(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, idx[..., None], g[..., None], axis=-1)
        _accum(a, full)

    return _make(out_data, (a,), backward, "take_along_last")


# -- asymmetric expectile penalty ----------------------------------------------


def expectile_l2(pred: Tensor, target, alpha: float) -> Tensor:
    """Elementwise |alpha - 1(u < 0)| * u**2 with residual u = target - pred.

    The indicator weight is piecewise constant, so treating it as a constant in
    backward gives the exact derivative (the penalty is C^1 at u = 0).
    """
    target = _wrap(target, pred.dtype)
    _check_dtypes(pred, target, "expectile_l2")
    u = target.data - pred.data
    w = np.where(u < 0.0, 1.0 - alpha, alpha).astype(pred.dtype)
    out_data = w * u * u

    def backward(g):
        du = g * w * 2.0 * u
        _accum(pred, _unbroadcast(-du, pred.data.shape))
        _accum(target, _unbroadcast(du, target.data.shape))

    return _make(out_data, (pred, target), backward, "expectile_l2")


# -- composites (no new gradients) ---------------------------------------------


def squared_error(a: Tensor, b) -> Tensor:
    return power(a - _wrap(b, a.dtype), 2.0)


def masked_mean(x: Tensor, mask: np.ndarray) -> Tensor:
    """Mean of x over the entries where mask is True (mask is a constant)."""
    mask = np.broadcast_to(np.asarray(mask), x.data.shape)
    count = float(mask.sum())
    if count == 0:
        raise ValueError("masked_mean: empty mask")
    return mul(reduce_sum(mul(x, mask.astype(x.dtype))), 1.0 / count)


def cross_entropy_logits(logits: Tensor, targets: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer targets under the logits."""
    nll = -take_along_last(log_softmax(logits, axis=-1), targets)
    return masked_mean(nll, mask)
