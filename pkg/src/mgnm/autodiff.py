"""Tape-based reverse-mode differentiation over 2-D float64 matrices.

Every value is a :class:`Tensor` holding a ``(rows, cols)`` array.  Tensors
created through :meth:`Tape.leaf` are trainable; every op applied to a tensor
that lives on a tape appends a node with its vector-Jacobian product.  Tensors
with no tape (see :func:`constant`) are plain values, so running the forward
pass over constants gives a gradient-free evaluation path.

Graph structure (:class:`SparseMatrix`) is never differentiated.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

EPS = 1e-12


class ShapeError(ValueError):
    """Raised when an op receives operands of incompatible shape."""

    def __init__(self, op: str, *shapes: tuple[int, ...]):
        self.op = op
        self.shapes = shapes
        super().__init__(f"{op}: incompatible shapes {' and '.join(str(s) for s in shapes)}")


class TapeError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "tape", "index", "name")

    def __init__(self, data, requires_grad: bool = False, tape: "Tape | None" = None):
        if type(data) is np.ndarray and data.dtype == np.float64 and data.ndim == 2:
            arr = data
        else:
            arr = np.asarray(data, dtype=np.float64)
            if arr.ndim == 0:
                arr = arr.reshape(1, 1)
            elif arr.ndim == 1:
                arr = arr.reshape(1, -1)
            elif arr.ndim != 2:
                raise ValueError(f"Tensor must be 2-D, got ndim={arr.ndim}")
        self.data = arr
        self.requires_grad = requires_grad
        self.tape = tape
        self.index = -1
        self.name: str | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape  # type: ignore[return-value]

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.shape != (1, 1):
            raise ShapeError("item", self.shape)
        return float(self.data[0, 0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def constant(data) -> Tensor:
    """Wrap an array as a value that is never differentiated."""
    return Tensor(data)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


class SparseMatrix:
    """Constant sparse matrix in coordinate form, stored as CSR for products.

    Entries must be unique ``(row, col)`` pairs inside ``shape``; they are kept
    sorted row-major.
    """

    def __init__(self, rows, cols, values, shape: tuple[int, int]):
        rows = np.asarray(rows, dtype=np.int64).ravel()
        cols = np.asarray(cols, dtype=np.int64).ravel()
        values = np.asarray(values, dtype=np.float64).ravel()
        if not (len(rows) == len(cols) == len(values)):
            raise ValueError("rows, cols and values must have equal length")
        n_rows, n_cols = shape
        if len(rows) and (rows.min() < 0 or cols.min() < 0 or rows.max() >= n_rows or cols.max() >= n_cols):
            raise ValueError(f"sparse entry index outside shape {shape}")
        order = np.lexsort((cols, rows))
        rows, cols, values = rows[order], cols[order], values[order]
        if len(rows) > 1:
            dup = (np.diff(rows) == 0) & (np.diff(cols) == 0)
            if dup.any():
                k = int(np.flatnonzero(dup)[0])
                raise ValueError(f"duplicate sparse entry ({rows[k]}, {cols[k]})")
        self.shape = (int(n_rows), int(n_cols))
        self.rows, self.cols, self.values = rows, cols, values
        self.csr = sp.csr_matrix((values, (rows, cols)), shape=self.shape)
        self._csr_t = self.csr.T.tocsr()

    @classmethod
    def identity(cls, n: int) -> "SparseMatrix":
        idx = np.arange(n)
        return cls(idx, idx, np.ones(n), (n, n))

    @property
    def entries(self) -> list[tuple[int, int, float]]:
        return [(int(r), int(c), float(v)) for r, c, v in zip(self.rows, self.cols, self.values)]

    @property
    def nnz(self) -> int:
        return len(self.values)

    def to_dense(self) -> np.ndarray:
        return self.csr.toarray()

    def dot(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(self.csr @ x)

    def rdot(self, g: np.ndarray) -> np.ndarray:
        """``self.T @ g``."""
        return np.asarray(self._csr_t @ g)

    def __repr__(self) -> str:
        return f"SparseMatrix(shape={self.shape}, nnz={self.nnz})"


class _Node:
    __slots__ = ("output", "inputs", "vjp")

    def __init__(self, output: Tensor, inputs: tuple[Tensor, ...], vjp):
        self.output = output
        self.inputs = inputs
        self.vjp = vjp


class Tape:
    """Ordered record of ops; inputs always precede the node consuming them."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.leaves: dict[str, Tensor] = {}

    def leaf(self, name: str, data, requires_grad: bool = True) -> Tensor:
        if name in self.leaves:
            raise TapeError(f"leaf {name!r} already registered")
        t = Tensor(np.array(data, dtype=np.float64), requires_grad=requires_grad, tape=self)
        t.name = name
        self._append(t, (), None)
        self.leaves[name] = t
        return t

    def _append(self, out: Tensor, inputs, vjp) -> None:
        out.index = len(self.nodes)
        self.nodes.append(_Node(out, tuple(inputs), vjp))

    def backward(self, loss: Tensor) -> dict[str, np.ndarray]:
        """Gradient of scalar ``loss`` w.r.t. every trainable leaf.

        Leaves that do not influence the loss receive zeros.
        """
        if loss.shape != (1, 1):
            raise TapeError(f"backward needs a 1x1 loss, got {loss.shape}")
        if loss.tape is not self or loss.index < 0 or self.nodes[loss.index].output is not loss:
            raise TapeError("loss was not recorded on this tape")
        grads: dict[int, np.ndarray] = {loss.index: np.ones((1, 1))}
        for idx in range(loss.index, -1, -1):
            node = self.nodes[idx]
            g = grads.get(idx)
            if g is None or node.vjp is None:
                continue
            del grads[idx]
            for inp, gi in zip(node.inputs, node.vjp(g)):
                if gi is None or inp.tape is not self or not inp.requires_grad:
                    continue
                prev = grads.get(inp.index)
                grads[inp.index] = gi if prev is None else prev + gi
        out = {}
        for name, t in self.leaves.items():
            if t.requires_grad:
                g = grads.get(t.index)
                out[name] = np.zeros(t.shape) if g is None else np.array(g, dtype=np.float64)
        return out


def _record(data: np.ndarray, inputs: Sequence[Tensor], vjp) -> Tensor:
    tape = None
    for t in inputs:
        if t.requires_grad:
            if tape is None:
                tape = t.tape
            elif t.tape is not tape:
                raise TapeError("operands live on different tapes")
    out = Tensor(data, requires_grad=tape is not None, tape=tape)
    if tape is not None:
        tape._append(out, inputs, vjp)
    return out


# -- broadcasting helpers ----------------------------------------------------

def _broadcast_shape(op: str, a: tuple, b: tuple) -> tuple[int, int]:
    out = []
    for x, y in zip(a, b):
        if x == y or y == 1:
            out.append(x)
        elif x == 1:
            out.append(y)
        else:
            raise ShapeError(op, a, b)
    return tuple(out)  # type: ignore[return-value]


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    return g


# -- op suite ----------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    av, bv = a.data, b.data
    return _record(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def spmm(s: SparseMatrix, x: Tensor) -> Tensor:
    """Sparse-constant times dense tensor."""
    if s.shape[1] != x.shape[0]:
        raise ShapeError("spmm", s.shape, x.shape)
    return _record(s.dot(x.data), (x,), lambda g: (s.rdot(g),))


def transpose(x: Tensor) -> Tensor:
    return _record(x.data.T.copy(), (x,), lambda g: (g.T,))


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("add", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _record(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("sub", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _record(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product with row/column-vector broadcasting."""
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("mul", a.shape, b.shape)
    av, bv = a.data, b.data
    return _record(
        av * bv,
        (a, b),
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
    )


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _record(x.data * c, (x,), lambda g: (g * c,))


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)
    return _record(y, (x,), lambda g: (g * y * (1.0 - y),))


def _sigmoid(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _record(y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    """Natural log of ``max(x, 1e-12)``; gradient is zero in the clamped region."""
    v = x.data
    safe = np.maximum(v, EPS)
    live = v > EPS
    return _record(np.log(safe), (x,), lambda g: (np.where(live, g / safe, 0.0),))


def softplus(x: Tensor) -> Tensor:
    v = x.data
    s = _sigmoid(v)
    return _record(np.logaddexp(0.0, v), (x,), lambda g: (g * s,))


def row_l2_normalize(x: Tensor) -> Tensor:
    """Divide each row by ``max(||row||, 1e-12)``; zero rows stay zero."""
    v = x.data
    norm = np.sqrt((v * v).sum(axis=1, keepdims=True))
    denom = np.maximum(norm, EPS)
    y = v / denom
    live = norm > EPS

    def vjp(g):
        proj = (g * y).sum(axis=1, keepdims=True)
        return (np.where(live, (g - y * proj) / denom, g / EPS),)

    return _record(y, (x,), vjp)


def row_mean(x: Tensor) -> Tensor:
    n_cols = x.shape[1]
    return _record(x.data.mean(axis=1, keepdims=True), (x,), lambda g: (np.repeat(g / n_cols, n_cols, axis=1),))


def col_mean(x: Tensor) -> Tensor:
    n_rows = x.shape[0]
    return _record(x.data.mean(axis=0, keepdims=True), (x,), lambda g: (np.repeat(g / n_rows, n_rows, axis=0),))


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = x.shape
    return _record(np.array([[x.data.sum()]]), (x,), lambda g: (np.full(shape, g[0, 0]),))


def frobenius_norm(x: Tensor) -> Tensor:
    v = x.data
    n = float(np.sqrt((v * v).sum()))
    denom = max(n, EPS)
    return _record(np.array([[n]]), (x,), lambda g: (g[0, 0] * v / denom,))


def row_softmax(x: Tensor) -> Tensor:
    v = x.data
    z = np.exp(v - v.max(axis=1, keepdims=True))
    y = z / z.sum(axis=1, keepdims=True)
    return _record(y, (x,), lambda g: (y * (g - (g * y).sum(axis=1, keepdims=True)),))


def dropout_mask(shape: tuple[int, int], rate: float, rng: np.random.Generator) -> np.ndarray:
    """Inverted-dropout mask: kept entries are scaled by ``1 / (1 - rate)``."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return np.ones(shape)
    keep = rng.random(shape) >= rate
    return keep / (1.0 - rate)


def dropout(x: Tensor, mask: np.ndarray | None) -> Tensor:
    """Apply a precomputed mask; ``None`` is the identity (evaluation mode)."""
    if mask is None:
        return x
    if mask.shape != x.shape:
        raise ShapeError("dropout", x.shape, mask.shape)
    return _record(x.data * mask, (x,), lambda g: (g * mask,))


def concat_rows(xs: Sequence[Tensor]) -> Tensor:
    if not xs:
        raise ValueError("concat_rows needs at least one tensor")
    n_cols = xs[0].shape[1]
    for x in xs[1:]:
        if x.shape[1] != n_cols:
            raise ShapeError("concat_rows", xs[0].shape, x.shape)
    bounds = np.cumsum([0] + [x.shape[0] for x in xs])
    data = np.concatenate([x.data for x in xs], axis=0)
    return _record(data, tuple(xs), lambda g: tuple(g[bounds[k]:bounds[k + 1]] for k in range(len(xs))))


def slice_rows(x: Tensor, index) -> Tensor:
    """Select rows by ``slice`` or integer array (gather); repeats accumulate in backward."""
    n_rows, n_cols = x.shape
    if isinstance(index, slice):
        start, stop, step = index.indices(n_rows)
        index = np.arange(start, stop, step)
    index = np.asarray(index, dtype=np.int64)
    if index.ndim != 1:
        raise ValueError("row index must be 1-D")
    if len(index) and (index.min() < -n_rows or index.max() >= n_rows):
        raise IndexError(f"slice_rows: index out of range for {x.shape}")

    def vjp(g):
        out = np.zeros((n_rows, n_cols))
        np.add.at(out, index, g)
        return (out,)

    return _record(x.data[index], (x,), vjp)


# -- gradient verification -----------------------------------------------------

LossBuilder = Callable[[Tape, dict[str, Tensor]], Tensor]


class NondeterministicLoss(RuntimeError):
    pass


def evaluate_loss(build_loss: LossBuilder, params: dict[str, np.ndarray]) -> float:
    tape = Tape()
    tensors = {name: tape.leaf(name, value) for name, value in params.items()}
    return build_loss(tape, tensors).item()


def gradients(build_loss: LossBuilder, params: dict[str, np.ndarray]) -> tuple[float, dict[str, np.ndarray]]:
    tape = Tape()
    tensors = {name: tape.leaf(name, value) for name, value in params.items()}
    loss = build_loss(tape, tensors)
    return loss.item(), tape.backward(loss)


def finite_diff_check(
    build_loss: LossBuilder,
    params: dict[str, np.ndarray],
    step: float = 1e-5,
    max_entries: int = 200,
    seed: int = 0,
) -> float:
    """Largest relative error between tape gradients and central differences.

    Tensors with more than ``max_entries`` entries are checked on a seeded
    random subsample of that many entries.  Relative error per entry is
    ``|a - b| / max(1e-8, |a| + |b|)``.
    """
    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    loss0, grads = gradients(build_loss, base)
    if evaluate_loss(build_loss, base) != loss0:
        raise NondeterministicLoss("two forward passes at the same point disagree")
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name in sorted(base):
        arr = base[name]
        flat = np.arange(arr.size)
        if arr.size > max_entries:
            flat = np.sort(rng.choice(arr.size, size=max_entries, replace=False))
        for k in flat:
            idx = np.unravel_index(k, arr.shape)
            orig = arr[idx]
            arr[idx] = orig + step
            up = evaluate_loss(build_loss, base)
            arr[idx] = orig - step
            down = evaluate_loss(build_loss, base)
            arr[idx] = orig
            numeric = (up - down) / (2.0 * step)
            analytic = grads[name][idx]
            err = abs(analytic - numeric) / max(1e-8, abs(analytic) + abs(numeric))
            worst = max(worst, err)
    return worst

