"""Dense 2-D reverse-mode differentiation.

Every value is a :class:`Tensor` holding a 2-D ``float64`` array. Operations
executed while a :class:`Tape` is active are appended to that tape in
execution order, so the tape is topologically sorted by construction and
``Tape.backward`` only has to replay it in reverse.

Outside a tape nothing is recorded, which is what evaluation code wants.

>>> w = Tensor([[1.0, 2.0]], requires_grad=True)
>>> with Tape() as tape:
...     loss = (w * w).sum()
>>> tape.backward(loss)
>>> w.grad
array([[2., 4.]])
"""

from __future__ import annotations

import contextvars
from collections import OrderedDict
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import sparse

__all__ = [
    "Tensor",
    "Tape",
    "ParamStore",
    "as_tensor",
    "matmul",
    "softmax_rows",
    "elementwise",
    "tanh",
    "relu",
    "sigmoid",
    "exp",
    "log",
    "softplus",
    "pairwise_sq_dists",
    "gather_sq_dists",
    "gather_matmul",
    "segment_max",
    "glorot_uniform",
]

_ACTIVE_TAPE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "dmps_active_tape", default=None
)


def _as_2d(value) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim == 0:
        return arr.reshape(1, 1)
    if arr.ndim == 1:
        return arr.reshape(1, -1)
    if arr.ndim != 2:
        raise ValueError(f"tensors are 2-D, got array of shape {arr.shape}")
    return arr


class Tensor:
    """A 2-D float64 array with an optional gradient."""

    __slots__ = ("data", "grad", "requires_grad", "name")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = _as_2d(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single value, tensor has shape {self.shape}")
        return float(self.data[0, 0])

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

    # arithmetic
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(as_tensor(other), self)

    def sum(self, axis: int | None = None) -> "Tensor":
        return tsum(self, axis)

    def mean(self, axis: int | None = None) -> "Tensor":
        count = self.data.size if axis is None else self.data.shape[axis]
        return tsum(self, axis) * (1.0 / count)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


class _Record:
    __slots__ = ("output", "inputs", "backward")

    def __init__(self, output: Tensor, inputs: tuple[Tensor, ...], backward: Callable):
        self.output = output
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Define-by-run computation record.

    Use as a context manager around the forward pass, then call
    :meth:`backward` on a scalar (1x1) result. Gradients are *accumulated*
    into the ``.grad`` of every leaf tensor with ``requires_grad``; call
    :meth:`ParamStore.zero_grad` between steps.
    """

    def __init__(self):
        self.records: list[_Record] = []
        self._token = None

    def __enter__(self) -> "Tape":
        if self._token is not None:
            raise RuntimeError("tape is already active")
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.records)

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        produced = {id(r.output) for r in self.records}
        if id(loss) not in produced:
            raise ValueError("loss was not produced on this tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for rec in reversed(self.records):
            g_out = grads.pop(id(rec.output), None)
            if g_out is None:
                continue
            g_inputs = rec.backward(g_out)
            for inp, g in zip(rec.inputs, g_inputs):
                if g is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g
                if key not in produced:
                    leaves[key] = inp
        for key, leaf in leaves.items():
            g = grads[key]
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


def _emit(data: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data)
    tape = _ACTIVE_TAPE.get()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.records.append(_Record(out, tuple(inputs), backward))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    for axis in (0, 1):
        if shape[axis] == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _emit(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def neg(a: Tensor) -> Tensor:
    return _emit(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _emit(a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def backward(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * out / b.data, b.shape),
        )

    return _emit(out, (a, b), backward)


def matmul(a, b) -> Tensor:
    """Matrix product with the usual ``G B^T`` / ``A^T G`` backward rule."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    return _emit(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def transpose(a: Tensor) -> Tensor:
    return _emit(a.data.T.copy(), (a,), lambda g: (g.T,))


def tsum(a: Tensor, axis: int | None = None) -> Tensor:
    shape = a.shape
    if axis is None:
        out = np.array([[a.data.sum()]])
    else:
        out = a.data.sum(axis=axis, keepdims=True)
    return _emit(out, (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


# name -> (forward, derivative expressed through (input, output))
_ELEMENTWISE: dict[str, tuple[Callable, Callable]] = {
    "identity": (lambda x: x.copy(), lambda x, y: np.ones_like(x)),
    "tanh": (np.tanh, lambda x, y: 1.0 - y * y),
    "relu": (lambda x: np.maximum(x, 0.0), lambda x, y: (x > 0).astype(np.float64)),
    "sigmoid": (_sigmoid, lambda x, y: y * (1.0 - y)),
    "exp": (np.exp, lambda x, y: y),
    "log": (np.log, lambda x, y: 1.0 / x),
    "softplus": (_softplus, lambda x, y: _sigmoid(x)),
}

ACTIVATIONS = ("identity", "tanh", "relu", "sigmoid", "exp")


def elementwise(name: str, x: Tensor) -> Tensor:
    """Apply a named scalar function entrywise."""
    try:
        fwd, deriv = _ELEMENTWISE[name]
    except KeyError:
        raise ValueError(f"unknown elementwise function {name!r}") from None
    x = as_tensor(x)
    y = fwd(x.data)
    return _emit(y, (x,), lambda g: (g * deriv(x.data, y),))


def tanh(x):
    return elementwise("tanh", x)


def relu(x):
    return elementwise("relu", x)


def sigmoid(x):
    return elementwise("sigmoid", x)


def exp(x):
    return elementwise("exp", x)


def log(x):
    return elementwise("log", x)


def softplus(x):
    return elementwise("softplus", x)


def softmax_rows(m, mask: np.ndarray | None = None) -> Tensor:
    """Row-wise softmax with max subtraction.

    ``mask`` (boolean, same shape) restricts each row's support; masked-out
    entries come out exactly zero. Every row needs at least one unmasked
    entry.
    """
    m = as_tensor(m)
    z = m.data
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

    return _emit(y, (m,), backward)


def pairwise_sq_dists(phi) -> Tensor:
    """Squared Euclidean distances between all rows, ``D[i, j] = |phi_i - phi_j|^2``."""
    phi = as_tensor(phi)
    n = phi.shape[0]
    return gather_sq_dists(phi, np.broadcast_to(np.arange(n), (n, n)))


def _scatter_matrix(values: np.ndarray, idx: np.ndarray) -> sparse.csr_matrix:
    """Sparse ``(N, N)`` matrix with ``values[i, j]`` at ``(i, idx[i, j])``; duplicates add."""
    n, m = idx.shape
    rows = np.repeat(np.arange(n), m)
    return sparse.csr_matrix((values.ravel(), (rows, idx.ravel())), shape=(n, n))


def gather_sq_dists(phi, idx: np.ndarray) -> Tensor:
    """``D[i, j] = |phi_i - phi_{idx[i, j]}|^2`` from explicit differences.

    Differences rather than the Gram expansion keep ``D[i, i]`` exactly zero
    and ``D`` exactly symmetric when ``idx`` is a permutation layout.
    """
    phi = as_tensor(phi)
    x = phi.data
    diff = x[:, None, :] - x[idx]
    d = np.einsum("ijk,ijk->ij", diff, diff)

    def backward(g):
        gs = _scatter_matrix(g, idx)
        deg = g.sum(axis=1) + np.asarray(gs.sum(axis=0)).ravel()
        return (2.0 * (deg[:, None] * x - gs @ x - gs.T @ x),)

    return _emit(d, (phi,), backward)


def gather_matmul(w, x, idx: np.ndarray) -> Tensor:
    """``out[i] = sum_j w[i, j] * x[idx[i, j]]``; a row-compressed sparse product."""
    w, x = as_tensor(w), as_tensor(x)
    if w.shape != idx.shape:
        raise ValueError(f"weights {w.shape} do not match layout {idx.shape}")
    xg = x.data[idx]
    out = np.einsum("ij,ijk->ik", w.data, xg)

    def backward(g):
        gw = np.einsum("ik,ijk->ij", g, xg)
        gx = _scatter_matrix(w.data, idx).T @ g
        return gw, np.asarray(gx)

    return _emit(out, (w, x), backward)


def segment_max(x, offsets: np.ndarray) -> Tensor:
    """Column-wise max within consecutive row blocks.

    ``offsets`` has ``B + 1`` entries; block ``b`` is rows
    ``offsets[b]:offsets[b+1]``. Ties route the gradient to the first row.
    """
    x = as_tensor(x)
    n_seg = len(offsets) - 1
    cols = x.shape[1]
    out = np.empty((n_seg, cols))
    arg = np.empty((n_seg, cols), dtype=np.intp)
    for b in range(n_seg):
        lo, hi = offsets[b], offsets[b + 1]
        if hi <= lo:
            raise ValueError(f"segment {b} is empty")
        block = x.data[lo:hi]
        idx = block.argmax(axis=0)
        arg[b] = idx + lo
        out[b] = block[idx, np.arange(cols)]

    def backward(g):
        gx = np.zeros_like(x.data)
        col = np.broadcast_to(np.arange(cols), arg.shape)
        np.add.at(gx, (arg, col), g)
        return (gx,)

    return _emit(out, (x,), backward)


def glorot_uniform(fan_in: int, fan_out: int, rng: np.random.Generator) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class ParamStore:
    """Ordered, named collection of trainable tensors."""

    def __init__(self, arrays: dict[str, np.ndarray] | None = None):
        self._params: "OrderedDict[str, Tensor]" = OrderedDict()
        for name, value in (arrays or {}).items():
            self.add(name, value)

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise KeyError(f"parameter {name!r} already exists")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self) -> Iterable[tuple[str, Tensor]]:
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def grads(self) -> dict[str, np.ndarray | None]:
        return {k: t.grad for k, t in self._params.items()}

    def snapshot(self) -> dict[str, np.ndarray]:
        """Copies of the current values, safe to hand to other workers."""
        out = {}
        for k, t in self._params.items():
            arr = t.data.copy()
            arr.flags.writeable = False
            out[k] = arr
        return out

    def copy(self) -> "ParamStore":
        return ParamStore({k: t.data.copy() for k, t in self._params.items()})

    def num_values(self) -> int:
        return sum(t.data.size for t in self._params.values())
