"""Dense float64 tensors with define-by-run reverse-mode autodiff.

Every op builds a new :class:`Tensor` that remembers its parents and a
backward rule mapping the output gradient to one gradient per parent.
Calling :meth:`Tensor.backward` on a scalar walks the recorded nodes in
reverse construction order, so each node is visited exactly once.

Broadcasting is deliberately narrow: operands must have equal shapes, or one
of them must be a scalar. Bias addition goes through :func:`affine`.
"""
from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

_node_ids = itertools.count()

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class DomainError(ValueError):
    """An op was evaluated outside its mathematical domain."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_id", "op")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (),
                 _backward: BackwardFn | None = None, op: str = ""):
        self.data = np.array(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = _parents
        self._backward = _backward
        self._id = next(_node_ids)
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.data)))

    def check_finite(self, what: str = "tensor") -> None:
        if not self.is_finite():
            raise FloatingPointError(f"{what} holds non-finite values")

    # operator sugar; the real work lives in the module-level functions
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __neg__(self): return negate(self)
    def __matmul__(self, other): return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self, axis: int | None = None) -> "Tensor":
        return tsum(self, axis)

    def mean(self) -> "Tensor":
        return mean(self)

    def relu(self) -> "Tensor":
        return relu(self)

    def exp(self) -> "Tensor":
        return exp(self)

    def log(self) -> "Tensor":
        return log(self)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], fn: BackwardFn, op: str) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=needs, _parents=parents if needs else (),
                  _backward=fn if needs else None, op=op)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # only scalar-vs-tensor broadcasting is allowed, so reduction is all-or-nothing
    return np.asarray(g.sum()) if shape == () and g.shape != () else g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and a.shape != () and b.shape != ():
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not broadcast-compatible")


# --- elementwise ---------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape),
                            _unbroadcast(g * a.data, b.shape)), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a constant that is not part of the graph."""
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def negate(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "negate")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    # np.maximum keeps NaN visible so divergence is not masked
    return _make(np.maximum(a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise DomainError("log of a non-positive value")
    x = a.data
    return _make(np.log(x), (a,), lambda g: (g / x,), "log")


def elementwise(op: str, *args) -> Tensor:
    """Dispatch by name: add, sub, mul, scale, relu, exp, log, negate."""
    table = {"add": add, "sub": sub, "mul": mul, "scale": scale, "relu": relu,
             "exp": exp, "log": log, "negate": negate}
    try:
        fn = table[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


# --- reductions and reshaping -------------------------------------------

def tsum(a: Tensor, axis: int | None = None) -> Tensor:
    if axis is None:
        return _make(np.asarray(a.data.sum()), (a,),
                     lambda g: (np.broadcast_to(g, a.shape).copy(),), "sum")
    out = a.data.sum(axis=axis)
    return _make(out, (a,),
                 lambda g: (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),), "sum")


def mean(a: Tensor) -> Tensor:
    n = a.size
    return _make(np.asarray(a.data.mean()), (a,),
                 lambda g: (np.full(a.shape, float(g) / n),), "mean")


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {a.shape}")
    return _make(a.data.T.copy(), (a,), lambda g: (g.T,), "transpose")


def pick(a: Tensor, index: np.ndarray) -> Tensor:
    """Row-wise gather: out[i] = a[i, index[i]]."""
    index = np.asarray(index, dtype=np.int64)
    if a.ndim != 2 or index.shape != (a.shape[0],):
        raise ShapeError(f"pick: cannot index {a.shape} with {index.shape}")
    rows = np.arange(a.shape[0])

    def _bw(g):
        full = np.zeros(a.shape)
        full[rows, index] = g
        return (full,)

    return _make(a.data[rows, index], (a,), _bw, "pick")


# --- linear algebra ------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    return _make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b with the bias broadcast over rows."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"affine: {x.shape} @ {w.shape}")
    if b.shape != (w.shape[1],):
        raise ShapeError(f"affine: bias shape {b.shape} does not match {w.shape[1]} outputs")
    return _make(x.data @ w.data + b.data, (x, w, b),
                 lambda g: (g @ w.data.T, x.data.T @ g, g.sum(axis=0)), "affine")


# --- normalisation and softmax ------------------------------------------

def l2_normalize(v: Tensor, eps: float = 1e-12) -> Tensor:
    """Divide each trailing-axis vector by max(||v||, eps)."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    norm = np.sqrt((v.data * v.data).sum(axis=-1, keepdims=True))
    denom = np.maximum(norm, eps)
    out = v.data / denom
    clipped = norm < eps

    def _bw(g):
        # below eps the denominator is constant, so the map is linear
        proj = (g * out).sum(axis=-1, keepdims=True)
        return (np.where(clipped, g / denom, (g - out * proj) / denom),)

    return _make(out, (v,), _bw, "l2_normalize")


def softmax(z: Tensor) -> Tensor:
    if z.ndim != 2 or z.shape[1] < 1:
        raise ShapeError(f"softmax expects b x c with c >= 1, got {z.shape}")
    shifted = z.data - z.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=1, keepdims=True)
    return _make(s, (z,), lambda g: (s * (g - (g * s).sum(axis=1, keepdims=True)),), "softmax")


def log_softmax(z: Tensor) -> Tensor:
    if z.ndim != 2 or z.shape[1] < 1:
        raise ShapeError(f"log_softmax expects b x c with c >= 1, got {z.shape}")
    shifted = z.data - z.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out = shifted - lse
    s = np.exp(out)
    return _make(out, (z,), lambda g: (g - s * g.sum(axis=1, keepdims=True),), "log_softmax")


def softmax_np(z: np.ndarray) -> np.ndarray:
    """Graph-free softmax over the last axis."""
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors),
                 lambda g: tuple(np.split(g, cuts, axis=axis)), "concat")


# --- backward pass -------------------------------------------------------

def _reachable(root: Tensor) -> list[Tensor]:
    seen: dict[int, Tensor] = {}
    stack = [root]
    while stack:
        t = stack.pop()
        if t._id in seen or not t.requires_grad:
            continue
        seen[t._id] = t
        stack.extend(t._parents)
    # node ids increase with construction, so descending id is a valid reverse topological order
    return sorted(seen.values(), key=lambda t: t._id, reverse=True)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable grad-tracking tensor.

    Gradients accumulate across calls; callers zero them between steps.
    """
    if loss.size != 1 or loss.ndim > 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor that requires grad")
    pending: dict[int, np.ndarray] = {loss._id: np.ones(loss.shape)}
    for node in _reachable(loss):
        g = pending.pop(node._id, None)
        if g is None:
            continue
        node.grad = g.copy() if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = pending.get(parent._id)
            pending[parent._id] = pg if prev is None else prev + pg


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# --- numerical gradient check -------------------------------------------

def numerical_grad(fn: Callable[[], Tensor], x: Tensor, step: float = 1e-5) -> np.ndarray:
    """Central finite differences of the scalar ``fn()`` with respect to ``x.data``."""
    out = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    g = out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = fn().item()
        flat[i] = orig - step
        lo = fn().item()
        flat[i] = orig
        g[i] = (hi - lo) / (2 * step)
    return out


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-10)
    return float(np.linalg.norm(a - b) / denom)


def gradcheck(fn: Callable[[], Tensor], inputs: Sequence[Tensor], step: float = 1e-5) -> float:
    """Worst relative error between autodiff and finite-difference gradients.

    ``fn`` must rebuild the graph from ``inputs`` on every call.
    """
    for t in inputs:
        t.grad = None
    fn().backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]
    worst = 0.0
    for t, ga in zip(inputs, analytic):
        worst = max(worst, relative_error(ga, numerical_grad(fn, t, step)))
    return worst
