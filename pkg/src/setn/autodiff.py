"""Reverse-mode automatic differentiation on dense float64 arrays.

Define-by-run: an operation records itself on the computation graph only
when one of its inputs needs gradients. ``backward`` walks the recorded
graph once in reverse topological order, deposits gradients on the
participating leaves, and frees the graph, so each recorded forward pass
supports exactly one backward pass.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, LabelError, ShapeError

Array = np.ndarray

# Entries this negative are squashed to exactly zero by a row softmax.
_MASK_FILL = -1e30


class Tensor:
    """Dense float64 array, optionally tracking gradients."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.ascontiguousarray(np.asarray(data, dtype=np.float64))
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor entries must be finite (NaN/Inf rejected)")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Array | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn: Callable[[Array], None] | None = None
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() expects a single element, got shape {self.data.shape}")
        return float(self.data.reshape(-1)[0])

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, _wrap(other))

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, _wrap(-1.0))

    def __sub__(self, other):
        return add(self, -_wrap(other))

    def __rsub__(self, other):
        return add(_wrap(other), -self)

    def __matmul__(self, other):
        return matmul(self, other)


def _wrap(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _op(data: Array, parents: tuple[Tensor, ...], backward_fn: Callable[[Array], None]) -> Tensor:
    """Build an op-result tensor, recording it when any parent needs gradients."""
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward_fn = backward_fn
    return out


def _accum(t: Tensor, g: Array) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    """Sum a gradient back down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires_grad leaf that ``loss`` depends on.

    The recorded graph is freed afterwards; calling backward a second time
    on the same loss raises.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if loss._consumed:
        raise ContractError("backward already ran for this recorded graph")
    if loss._backward_fn is None:
        raise ContractError("loss is not attached to a recorded computation")

    topo: list[Tensor] = []
    finished: set[int] = set()
    visited: set[int] = set()
    stack: list[Tensor] = [loss]
    while stack:
        node = stack[-1]
        if id(node) in visited:
            stack.pop()
            if id(node) not in finished:
                finished.add(id(node))
                topo.append(node)
            continue
        visited.add(id(node))
        for p in node._parents:
            if p._backward_fn is not None and id(p) not in visited:
                stack.append(p)

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        g = node.grad if node.grad is not None else np.zeros_like(node.data)
        node._backward_fn(g)  # type: ignore[misc]

    loss._consumed = True
    for node in topo:
        node._parents = ()
        node._backward_fn = None
        node.grad = None


# ---------------------------------------------------------------------------
# primitive operations


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = a.data + b.data

    def bw(g: Array) -> None:
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _op(data, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = a.data * b.data

    def bw(g: Array) -> None:
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _op(data, (a, b), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul needs rank-2 operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul dimension mismatch: {a.data.shape} @ {b.data.shape}")
    data = a.data @ b.data

    def bw(g: Array) -> None:
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _op(data, (a, b), bw)


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"transpose needs a rank-2 tensor, got shape {x.data.shape}")

    def bw(g: Array) -> None:
        _accum(x, g.T)

    return _op(x.data.T, (x,), bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map ``x @ weight + bias`` for x [n, d], weight [d, k], bias [k]."""
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise ShapeError(f"linear needs rank-2 input/weight, got {x.data.shape} and {weight.data.shape}")
    if x.data.shape[1] != weight.data.shape[0]:
        raise ShapeError(f"linear dimension mismatch: input {x.data.shape} vs weight {weight.data.shape}")
    if bias.data.shape != (weight.data.shape[1],):
        raise ShapeError(f"linear bias shape {bias.data.shape} does not match weight {weight.data.shape}")
    return add(matmul(x, weight), bias)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def bw(g: Array) -> None:
        _accum(x, g * mask)

    return _op(x.data * mask, (x,), bw)


def leaky_relu(x: Tensor, negative_slope: float = 0.2) -> Tensor:
    factor = np.where(x.data > 0, 1.0, negative_slope)

    def bw(g: Array) -> None:
        _accum(x, g * factor)

    return _op(x.data * factor, (x,), bw)


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax with per-row max subtraction for overflow safety."""
    if x.data.ndim != 2:
        raise ShapeError(f"softmax_rows needs a rank-2 tensor, got shape {x.data.shape}")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)

    def bw(g: Array) -> None:
        inner = (g * y).sum(axis=1, keepdims=True)
        _accum(x, (g - inner) * y)

    return _op(y, (x,), bw)


def activation(x: Tensor, kind: str) -> Tensor:
    if x.data.size == 0:
        raise ContractError("activation input must be non-empty")
    if kind == "relu":
        return relu(x)
    if kind == "leaky_relu":
        return leaky_relu(x)
    if kind == "softmax_rows":
        return softmax_rows(x)
    raise ValueError(f"unknown activation kind {kind!r}")


def dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: survivors scaled by 1/(1-rate) at train time, identity in eval."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs a seeded random generator")
    keep = (rng.random(x.data.shape) >= rate) / (1.0 - rate)

    def bw(g: Array) -> None:
        _accum(x, g * keep)

    return _op(x.data * keep, (x,), bw)


def cross_entropy(logits: Tensor, targets: Sequence[int]) -> Tensor:
    """Mean over rows of -log softmax(logits)[i, targets[i]]."""
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy needs rank-2 logits, got shape {logits.data.shape}")
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    n, c = logits.data.shape
    if t.shape[0] != n:
        raise ShapeError(f"{t.shape[0]} targets for {n} logit rows")
    for i, ti in enumerate(t):
        if not 0 <= ti < c:
            raise LabelError(f"target {ti} out of range [0, {c}) at row {i}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -logp[np.arange(n), t].mean()

    def bw(g: Array) -> None:
        p = np.exp(logp)
        p[np.arange(n), t] -= 1.0
        _accum(logits, (float(g.sum()) / n) * p)

    return _op(np.asarray(loss), (logits,), bw)


def take_rows(x: Tensor, indices) -> Tensor:
    """Gather rows (axis 0); gradients scatter-add back."""
    idx = np.asarray(list(indices), dtype=np.int64)
    data = x.data[idx]

    def bw(g: Array) -> None:
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        _accum(x, gx)

    return _op(data, (x,), bw)


def stack_rows(rows: Sequence[Tensor]) -> Tensor:
    """Stack 1-D tensors of equal length into a matrix."""
    rows = list(rows)
    if not rows:
        raise ShapeError("stack_rows needs at least one row")
    shape = rows[0].data.shape
    if len(shape) != 1 or any(r.data.shape != shape for r in rows):
        raise ShapeError("stack_rows needs 1-D tensors of identical length")
    data = np.stack([r.data for r in rows])

    def bw(g: Array) -> None:
        for i, r in enumerate(rows):
            _accum(r, g[i])

    return _op(data, tuple(rows), bw)


def mean_rows(x: Tensor) -> Tensor:
    """Column-wise mean over rows: [n, d] -> [d]."""
    if x.data.ndim != 2:
        raise ShapeError(f"mean_rows needs a rank-2 tensor, got shape {x.data.shape}")
    n = x.data.shape[0]

    def bw(g: Array) -> None:
        _accum(x, np.broadcast_to(g / n, x.data.shape))

    return _op(x.data.mean(axis=0), (x,), bw)


def max_rows(x: Tensor) -> Tensor:
    """Column-wise max over rows: [n, d] -> [d]. Gradient routes to the argmax row."""
    if x.data.ndim != 2:
        raise ShapeError(f"max_rows needs a rank-2 tensor, got shape {x.data.shape}")
    am = x.data.argmax(axis=0)
    cols = np.arange(x.data.shape[1])

    def bw(g: Array) -> None:
        gx = np.zeros_like(x.data)
        gx[am, cols] = g
        _accum(x, gx)

    return _op(x.data[am, cols], (x,), bw)


def sum_all(x: Tensor) -> Tensor:
    def bw(g: Array) -> None:
        _accum(x, np.full(x.data.shape, float(g.sum())))

    return _op(np.asarray(x.data.sum()), (x,), bw)


def reshape(x: Tensor, shape) -> Tensor:
    def bw(g: Array) -> None:
        _accum(x, g.reshape(x.data.shape))

    return _op(x.data.reshape(shape), (x,), bw)


def layer_norm_rows(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row normalization to zero mean / unit variance, then gain and bias."""
    if x.data.ndim != 2:
        raise ShapeError(f"layer_norm_rows needs a rank-2 tensor, got shape {x.data.shape}")
    d = x.data.shape[1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeError(f"layer norm gain/bias must have shape ({d},)")
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=1, keepdims=True) + eps)
    xhat = xc * inv

    def bw(g: Array) -> None:
        _accum(bias, g.sum(axis=0))
        _accum(gain, (g * xhat).sum(axis=0))
        gh = g * gain.data
        m1 = gh.mean(axis=1, keepdims=True)
        m2 = (gh * xhat).mean(axis=1, keepdims=True)
        _accum(x, inv * (gh - m1 - xhat * m2))

    return _op(xhat * gain.data + bias.data, (x, gain, bias), bw)


# ---------------------------------------------------------------------------
# parameter initialization


def xavier_uniform(rng: np.random.Generator, rows: int, cols: int) -> Tensor:
    limit = math.sqrt(6.0 / (rows + cols))
    return Tensor(rng.uniform(-limit, limit, (rows, cols)), requires_grad=True)


def normal_param(rng: np.random.Generator, shape, std: float = 0.02) -> Tensor:
    return Tensor(rng.normal(0.0, std, shape), requires_grad=True)


def zeros_param(*shape: int) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def ones_param(*shape: int) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Bias-corrected Adam; updates parameters in place."""

    def __init__(self, params: Iterable[Tensor], lr: float = 0.001,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads: Sequence[Array | None] | None = None) -> None:
        """Apply one update. ``grads`` defaults to each parameter's ``.grad``;
        a missing gradient counts as zero."""
        if grads is None:
            grads = [p.grad for p in self.params]
        grads = list(grads)
        if len(grads) != len(self.params):
            raise ShapeError(f"{len(grads)} gradients for {len(self.params)} parameters")
        self.step_count += 1
        bc1 = 1.0 - self.beta1 ** self.step_count
        bc2 = 1.0 - self.beta2 ** self.step_count
        for p, g, m, v in zip(self.params, grads, self._m, self._v):
            if g is None:
                g = np.zeros_like(p.data)
            else:
                g = np.asarray(g, dtype=np.float64)
                if g.shape != p.data.shape:
                    raise ShapeError(f"gradient shape {g.shape} does not match parameter {p.data.shape}")
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


# ---------------------------------------------------------------------------
# gradient checking


def _max_rel_err(a: Array, b: Array) -> float:
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-12)
    err = np.abs(a - b) / denom
    return float(err.max()) if err.size else 0.0


def _check_scalar_deterministic(f, *args) -> Tensor:
    out1 = f(*args)
    out2 = f(*args)
    if out1.data.size != 1 or out2.data.size != 1:
        raise ContractError(f"grad check needs a scalar-valued function, got shape {out1.data.shape}")
    if not np.array_equal(out1.data, out2.data):
        raise ContractError("grad check needs a deterministic function; two forward passes differ")
    return out2


def _fd_grad(f, x: Tensor, h: float) -> Array:
    fd = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    fdf = fd.reshape(-1)
    was = x.requires_grad
    x.requires_grad = False  # no need to record graphs during FD sweeps
    try:
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            hi = f().item()
            flat[i] = orig - h
            lo = f().item()
            flat[i] = orig
            fdf[i] = (hi - lo) / (2.0 * h)
    finally:
        x.requires_grad = was
    return fd


def grad_check(f, x: Tensor, h: float = 1e-5) -> float:
    """Max relative error between analytic and central finite-difference gradients
    of scalar-valued ``f`` with respect to ``x``."""
    out = _check_scalar_deterministic(f, x)
    x.grad = None
    if out._backward_fn is not None:
        backward(out)
    analytic = x.grad if x.grad is not None else np.zeros_like(x.data)
    fd = _fd_grad(lambda: f(x), x, h)
    x.grad = None
    return _max_rel_err(analytic, fd)


def grad_check_params(f, params: Sequence[Tensor], h: float = 1e-5) -> float:
    """Like ``grad_check`` but for a zero-argument closure over many parameters."""
    out = _check_scalar_deterministic(f)
    for p in params:
        p.grad = None
    if out._backward_fn is not None:
        backward(out)
    worst = 0.0
    flags = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        for p, was in zip(params, flags):
            analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
            fd = np.zeros_like(p.data)
            flat = p.data.reshape(-1)
            fdf = fd.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                hi = f().item()
                flat[i] = orig - h
                lo = f().item()
                flat[i] = orig
                fdf[i] = (hi - lo) / (2.0 * h)
            worst = max(worst, _max_rel_err(analytic, fd))
    finally:
        for p, was in zip(params, flags):
            p.requires_grad = was
            p.grad = None
    return worst
