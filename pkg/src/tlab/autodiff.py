"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations executed while a :class:`Tape` is active are recorded in order;
``backward`` walks the tape in reverse and accumulates gradients. Only leaf
tensors (``requires_grad=True`` with no producing op) and tensors flagged with
:meth:`Tensor.retain_grad` keep their ``.grad`` afterwards.

>>> with Tape():
...     x = Tensor([1.0, 2.0], requires_grad=True)
...     y = (x * x).sum()
...     backward(y)
>>> x.grad
array([2., 4.])
"""
from __future__ import annotations

import itertools
import threading
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "NumericOverflowError",
    "TapeError",
    "Tensor",
    "Tape",
    "backward",
    "no_tape",
    "add",
    "sub",
    "mul",
    "matmul",
    "relu",
    "row_softmax",
    "layer_norm",
    "scale_elementwise",
    "dropout",
    "cross_entropy",
    "embedding",
    "reshape",
    "swapaxes",
    "tsum",
    "tmean",
    "finite_diff_grad",
    "rel_error",
]

LN_EPS = 1e-5


class NumericOverflowError(FloatingPointError):
    """A forward or backward value became NaN or infinite."""


class TapeError(RuntimeError):
    pass


_ids = itertools.count(1)
_local = threading.local()


def _active_tape() -> Tape | None:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


def _check(arr: np.ndarray, where: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NumericOverflowError(f"non-finite value produced by {where}")
    return arr


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "retain", "node_id", "name", "_tape")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64) if not isinstance(data, np.ndarray) else data
        if arr.dtype != np.float64:
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.retain = False
        self.node_id = next(_ids)
        self.name = name
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def retain_grad(self) -> Tensor:
        self.retain = True
        return self

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

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

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self) -> Tensor:
        return tsum(self)

    def mean(self) -> Tensor:
        return tmean(self)


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], backward: Callable):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; ops see the innermost active tape on the
    current thread. A tape supports one ``backward`` call until ``reset``.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self) -> Tape:
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def reset(self) -> None:
        for node in self.nodes:
            node.out._tape = None
        self.nodes = []
        self.consumed = False

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward: Callable) -> None:
        if self.consumed:
            raise TapeError("tape already consumed by backward(); call reset() first")
        out._tape = self
        self.nodes.append(_Node(out, inputs, backward))

    def backward(self, loss: Tensor) -> None:
        if self.consumed:
            raise TapeError("backward() called twice without resetting the tape")
        if loss.data.size != 1:
            raise ValueError("backward() needs a scalar loss")
        if loss._tape is not self:
            raise TapeError("loss was not recorded on this tape")
        self.consumed = True
        grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(node.out.node_id, None)
            if g is None:
                continue
            if node.out.retain:
                node.out.grad = g if node.out.grad is None else node.out.grad + g
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                _check(gi, "backward")
                if inp._tape is self:
                    prev = grads.get(inp.node_id)
                    grads[inp.node_id] = gi if prev is None else prev + gi
                else:
                    inp.grad = gi.copy() if inp.grad is None else inp.grad + gi


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf reachable from ``loss``."""
    if loss._tape is None:
        raise TapeError("loss has no recorded history (run the forward inside a Tape)")
    loss._tape.backward(loss)


class no_tape:
    """Context in which no operations are recorded."""

    def __enter__(self):
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(None)

    def __exit__(self, *exc):
        _local.stack.pop()


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, inputs: Sequence[Tensor], backward: Callable, where: str) -> Tensor:
    _check(data, where)
    out = Tensor(data)
    if any(t.requires_grad for t in inputs):
        tape = _active_tape()
        if tape is not None:
            out.requires_grad = True
            tape.record(out, tuple(inputs), backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "mul")


def scale_elementwise(x: Tensor, w: Tensor) -> Tensor:
    """``x * w`` with ``w`` broadcast along the last axis of ``x``."""
    if w.ndim != 1 or w.shape[0] != x.shape[-1]:
        raise ValueError(f"scale vector of shape {w.shape} does not match last dim of {x.shape}")
    return mul(x, w)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(ad, -1, -2) @ g if b.requires_grad else None
        return (None if ga is None else _unbroadcast(ga, ad.shape),
                None if gb is None else _unbroadcast(gb, bd.shape))

    return _make(ad @ bd, (a, b), bw, "matmul")


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _make(np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,), "relu")


def row_softmax(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis. ``mask`` marks entries to exclude (True = masked)."""
    z = x.data
    if mask is not None:
        mask = np.broadcast_to(mask, z.shape)
        if mask.all(axis=-1).any():
            raise ValueError("row_softmax: a row has every entry masked")
        z = np.where(mask, -np.inf, z)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (x,), bw, "row_softmax")


def layer_norm(x: Tensor, gamma: Tensor, nu: Tensor, eps: float = LN_EPS) -> Tensor:
    """Per-row normalization over the last axis (population variance) plus affine."""
    if x.shape[-1] < 2:
        raise ValueError("layer_norm needs at least two features")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gamma.data
    reduce_axes = tuple(range(xd.ndim - 1))

    def bw(g):
        gx = None
        if x.requires_grad:
            gh = g * gd
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        gg = (g * xhat).sum(axis=reduce_axes) if gamma.requires_grad else None
        gn = g.sum(axis=reduce_axes) if nu.requires_grad else None
        return gx, gg, gn

    return _make(xhat * gd + nu.data, (x, gamma, nu), bw, "layer_norm")


def dropout(x: Tensor, p: float, train: bool, rng: np.random.Generator | None = None) -> Tensor:
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
    if not train or p == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs a generator")
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return _make(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under row-softmax of ``logits``."""
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    z = logits.data.reshape(-1, logits.shape[-1])
    m, v = z.shape
    if t.shape[0] != m:
        raise ValueError(f"{t.shape[0]} targets for {m} rows")
    if t.min(initial=0) < 0 or t.max(initial=0) >= v:
        raise IndexError("target index out of range")
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    rows = np.arange(m)
    loss = -logp[rows, t].mean()
    shape = logits.shape

    def bw(g):
        d = np.exp(logp)
        d[rows, t] -= 1.0
        return ((g / m) * d.reshape(shape),)

    return _make(np.array(loss), (logits,), bw, "cross_entropy")


def embedding(weight: Tensor, ids) -> Tensor:
    idx = np.asarray(ids, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= weight.shape[0]):
        raise IndexError("token id out of vocabulary range")

    def bw(g):
        gw = np.zeros_like(weight.data)
        np.add.at(gw, idx, g)
        return (gw,)

    return _make(weight.data[idx], (weight,), bw, "embedding")


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    return _make(np.swapaxes(x.data, a, b), (x,), lambda g: (np.swapaxes(g, a, b),), "swapaxes")


def tsum(x: Tensor) -> Tensor:
    shape = x.shape
    return _make(np.array(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def tmean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.data.size
    return _make(np.array(x.data.mean()), (x,),
                 lambda g: (np.broadcast_to(g / n, shape).copy(),), "mean")


def finite_diff_grad(f: Callable[[Tensor], Tensor | float], x: Tensor, h: float = 1e-5) -> Tensor:
    """Central-difference gradient of scalar ``f`` at ``x`` (``x.data`` is perturbed in place)."""

    def ev() -> float:
        with no_tape():
            out = f(x)
        return float(out.data) if isinstance(out, Tensor) else float(out)

    flat = x.data.reshape(-1)
    g = np.empty_like(flat)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + h
        fp = ev()
        flat[k] = orig - h
        fm = ev()
        flat[k] = orig
        g[k] = (fp - fm) / (2.0 * h)
    return Tensor(g.reshape(x.shape))


def rel_error(a, b) -> float:
    """Largest absolute difference, relative to the largest magnitude in either array."""
    a = a.data if isinstance(a, Tensor) else np.asarray(a, dtype=float)
    b = b.data if isinstance(b, Tensor) else np.asarray(b, dtype=float)
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-12)
    return float(np.abs(a - b).max(initial=0.0) / scale)
