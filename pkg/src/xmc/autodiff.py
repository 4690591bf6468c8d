"""Dense float64 tensors with reverse-mode automatic differentiation.

Define-by-run: each op returns a fresh :class:`Tensor` that remembers its
parents and a closure propagating the output gradient to them. ``backward``
replays the recorded graph in reverse creation order, which is a valid
topological order because operands always exist before their result.

Scope is deliberately small: 2-D matrices and vectors, no broadcasting beyond
scalar scaling and an explicit row-wise bias add. Gradients accumulate into
``.grad`` buffers; callers zero them between steps.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable

import numpy as np

from .errors import DegenerateInputError, DimensionError, UsageError

NORM_EPS = 1e-12

_node_ids = itertools.count()


class Tensor:
    """A float64 array, an optional gradient buffer, and graph bookkeeping."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_nid")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._nid = next(_node_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def detach(self) -> "Tensor":
        """A view of the same values that is cut off from the graph."""
        return Tensor(self.data)

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() needs a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _result(data: np.ndarray, parents: tuple[Tensor, ...],
            backward: Callable[[np.ndarray], None]) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every tensor the scalar ``loss`` depends on.

    Repeated calls without zeroing accumulate gradients on leaf tensors.
    """
    if loss.data.size != 1:
        raise UsageError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    seen: set[int] = set()
    nodes: list[Tensor] = []
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        nodes.append(t)
        stack.extend(t._parents)

    loss.grad = np.ones_like(loss.data)
    # Reverse creation order visits every node after all of its consumers.
    for t in sorted(nodes, key=lambda n: n._nid, reverse=True):
        if t._backward is None:
            continue
        if t.grad is not None:
            t._backward(t.grad)
            t.grad = None  # interior grads are consumed; leaves keep theirs


# ---------------------------------------------------------------------------
# ops
# ---------------------------------------------------------------------------

def _require_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: operand shapes {a.shape} and {b.shape} differ")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of a (M, K) and a (K, N) tensor."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def back(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return _result(a.data @ b.data, (a, b), back)


def add(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("add", a, b)

    def back(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(g)

    return _result(a.data + b.data, (a, b), back)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("sub", a, b)

    def back(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(-g)

    return _result(a.data - b.data, (a, b), back)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product."""
    _require_same_shape("mul", a, b)

    def back(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(g * b.data)
        if b.requires_grad:
            b._accumulate(g * a.data)

    return _result(a.data * b.data, (a, b), back)


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar constant."""
    c = float(c)

    def back(g: np.ndarray) -> None:
        a._accumulate(g * c)

    return _result(a.data * c, (a,), back)


def relu(a: Tensor) -> Tensor:
    """max(x, 0); the subgradient at exactly 0 is taken to be 0."""
    mask = a.data > 0.0

    def back(g: np.ndarray) -> None:
        a._accumulate(g * mask)

    return _result(np.where(mask, a.data, 0.0), (a,), back)


def add_bias(m: Tensor, b: Tensor) -> Tensor:
    """Add a length-N bias vector to every row of an (M, N) matrix."""
    if m.data.ndim != 2 or b.data.ndim != 1 or m.shape[1] != b.shape[0]:
        raise DimensionError(f"add_bias: matrix {m.shape} vs bias {b.shape}")

    def back(g: np.ndarray) -> None:
        if m.requires_grad:
            m._accumulate(g)
        if b.requires_grad:
            b._accumulate(g.sum(axis=0))

    return _result(m.data + b.data[None, :], (m, b), back)


def row_sum(m: Tensor) -> Tensor:
    """Sum each row of an (M, N) matrix, yielding a length-M vector."""
    if m.data.ndim != 2:
        raise DimensionError(f"row_sum: expected a matrix, got shape {m.shape}")

    def back(g: np.ndarray) -> None:
        m._accumulate(np.repeat(g[:, None], m.shape[1], axis=1))

    return _result(m.data.sum(axis=1), (m,), back)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    if int(np.prod(shape)) != a.data.size:
        raise DimensionError(f"reshape: cannot view {a.shape} as {shape}")

    def back(g: np.ndarray) -> None:
        a._accumulate(g.reshape(a.shape))

    return _result(a.data.reshape(shape), (a,), back)


def concat_cols(a: Tensor, b: Tensor) -> Tensor:
    """Column-wise concatenation of (M, Ca) and (M, Cb) matrices."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[0] != b.shape[0]:
        raise DimensionError(f"concat_cols: incompatible shapes {a.shape} and {b.shape}")
    ca = a.shape[1]

    def back(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(g[:, :ca])
        if b.requires_grad:
            b._accumulate(g[:, ca:])

    return _result(np.concatenate([a.data, b.data], axis=1), (a, b), back)


def pick_cols(m: Tensor, idx: np.ndarray) -> Tensor:
    """Select one column per row: out[i] = m[i, idx[i]]."""
    idx = np.asarray(idx)
    if m.data.ndim != 2 or idx.shape != (m.shape[0],):
        raise DimensionError(f"pick_cols: matrix {m.shape} vs index shape {idx.shape}")
    rows = np.arange(m.shape[0])

    def back(g: np.ndarray) -> None:
        full = np.zeros_like(m.data)
        full[rows, idx] = g
        m._accumulate(full)

    return _result(m.data[rows, idx], (m,), back)


def logsumexp_row(m: Tensor) -> Tensor:
    """Row-wise log(sum(exp(x))), stabilized by subtracting the row max."""
    if m.data.ndim != 2:
        raise DimensionError(f"logsumexp_row: expected a matrix, got shape {m.shape}")
    mx = m.data.max(axis=1, keepdims=True)
    ex = np.exp(m.data - mx)
    sums = ex.sum(axis=1, keepdims=True)
    out = (mx + np.log(sums)).reshape(-1)
    softmax = ex / sums

    def back(g: np.ndarray) -> None:
        m._accumulate(g[:, None] * softmax)

    return _result(out, (m,), back)


def l2_normalize(m: Tensor) -> Tensor:
    """Scale each row of an (M, N) matrix to unit Euclidean norm."""
    if m.data.ndim != 2:
        raise DimensionError(f"l2_normalize: expected a matrix, got shape {m.shape}")
    norms = np.sqrt((m.data * m.data).sum(axis=1))
    bad = np.nonzero(norms <= NORM_EPS)[0]
    if bad.size:
        raise DegenerateInputError(f"l2_normalize: row {bad[0]} has near-zero norm")
    out = m.data / norms[:, None]

    def back(g: np.ndarray) -> None:
        dots = (g * m.data).sum(axis=1)
        m._accumulate(g / norms[:, None] - m.data * (dots / norms**3)[:, None])

    return _result(out, (m,), back)


def sum_all(a: Tensor) -> Tensor:
    """Sum of all elements, as a scalar tensor."""

    def back(g: np.ndarray) -> None:
        a._accumulate(np.full_like(a.data, float(g)))

    return _result(np.asarray(a.data.sum()), (a,), back)


def mean_all(a: Tensor) -> Tensor:
    """Mean of all elements, as a scalar tensor."""
    n = a.data.size

    def back(g: np.ndarray) -> None:
        a._accumulate(np.full_like(a.data, float(g) / n))

    return _result(np.asarray(a.data.mean()), (a,), back)
