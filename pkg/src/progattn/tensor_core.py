"""
Dense 2-D float64 matrices with a reverse-mode differentiation record.

Every operation in this module returns a new `Tensor`. If any of the inputs is
bound to a `DiffRecord` (either a watched parameter or the output of an earlier
recorded operation), the result is appended to the same record together with a
closure computing the vector-Jacobian products for its inputs. Tensors that are
not bound to a record are constants: operations on them are evaluated eagerly
and nothing is stored.

A record is single-use: `backward` may be called once from a 1x1 root, after
which `DiffRecord.reset` must be called before another backward pass. Gradients
of watched parameters accumulate additively into `Tensor.grad`; zeroing these
between optimizer steps is the responsibility of the caller.

Only one broadcasting pattern is supported: a 1xn row combined elementwise with
an mxn matrix. In the backward pass the gradient of the broadcast row is the
column-sum of the incoming gradient.
"""

from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy

from .errors import ContractError, NumericalError, ShapeError, _collapse_str_

_BackwardFn = Callable[
    [numpy.ndarray, Tuple[bool, ...]], Tuple[Optional[numpy.ndarray], ...]
]


def _check_finite(kind: str, arr: numpy.ndarray) -> None:
    if not numpy.isfinite(arr).all():
        raise NumericalError(f"Operation [{kind}] produced non-finite values")


class Tensor(object):
    """
    Row-major matrix of 64-bit floats. One dimensional inputs are interpreted
    as 1xn row vectors, scalars as 1x1 matrices.
    """

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = numpy.array(data, dtype=numpy.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise ShapeError(f"Tensor must be at most 2-D, got shape {arr.shape}")
        _check_finite("construct", arr)
        self.data: numpy.ndarray = arr
        self.requires_grad = requires_grad
        self.name = name
        self.grad: Optional[numpy.ndarray] = (
            numpy.zeros_like(arr) if requires_grad else None
        )
        self._record: Optional["DiffRecord"] = None
        self._node: Optional[int] = None

    @classmethod
    def from_values(
        cls,
        rows: int,
        cols: int,
        values: Sequence[float],
        requires_grad: bool = False,
        name: Optional[str] = None,
    ) -> "Tensor":
        values = numpy.asarray(values, dtype=numpy.float64).reshape(-1)
        if values.size != rows * cols:
            raise ShapeError(
                f"Expected {rows}x{cols}={rows * cols} values, got {values.size}"
            )
        return cls(values.reshape(rows, cols), requires_grad=requires_grad, name=name)

    @classmethod
    def _wrap(cls, arr: numpy.ndarray) -> "Tensor":
        """Wrapping an already validated array without copying"""
        out = cls.__new__(cls)
        out.data = arr
        out.requires_grad = False
        out.name = None
        out.grad = None
        out._record = None
        out._node = None
        return out

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.data.shape

    @property
    def is_recorded(self) -> bool:
        return self._record is not None

    def item(self) -> float:
        if self.shape != (1, 1):
            raise ShapeError(f"item() requires a 1x1 tensor, got {self.shape}")
        return float(self.data[0, 0])

    def numpy(self) -> numpy.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data.copy())

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = numpy.zeros_like(self.data)

    def __repr__(self):
        label = f" name={self.name}" if self.name else ""
        return f"Tensor({self.rows}x{self.cols}{label})"


def constant(data) -> Tensor:
    return Tensor(data)


def zeros(rows: int, cols: int) -> Tensor:
    return Tensor._wrap(numpy.zeros((rows, cols)))


def ones(rows: int, cols: int) -> Tensor:
    return Tensor._wrap(numpy.ones((rows, cols)))


class _OpNode(object):
    __slots__ = ("kind", "parents", "backward_fn", "leaf", "grad")

    def __init__(self, kind, parents, backward_fn, leaf):
        self.kind: str = kind
        self.parents: Tuple[Optional[int], ...] = parents
        self.backward_fn: Optional[_BackwardFn] = backward_fn
        self.leaf: Optional[Tensor] = leaf
        self.grad: Optional[numpy.ndarray] = None


class DiffRecord(object):
    """
    Append-only list of operation nodes. Parent indices always point to
    earlier nodes, so walking the list backwards from the root is a valid
    reverse topological order.
    """

    def __init__(self):
        self.nodes: List[_OpNode] = []
        self._watched: Dict[int, Tensor] = {}
        self._consumed = False

    def __len__(self):
        return len(self.nodes)

    def watch(self, tensor: Tensor) -> Tensor:
        """
        Binding a trainable tensor into this record as a leaf node. The
        returned tensor shares storage with the original, and the gradient
        computed by `backward` is accumulated into the original `.grad`.
        Watching the same tensor twice returns the same bound leaf.
        """
        if not tensor.requires_grad:
            raise ContractError(f"Cannot watch {tensor!r}: requires_grad is not set")
        if tensor._record is not None:
            raise ContractError(f"{tensor!r} is already bound to a record")
        key = id(tensor)
        if key not in self._watched:
            bound = Tensor._wrap(tensor.data)
            bound.name = tensor.name
            bound._record = self
            bound._node = self._append("leaf", (), None, leaf=tensor)
            self._watched[key] = bound
        return self._watched[key]

    def _append(self, kind, parents, backward_fn, leaf=None) -> int:
        index = len(self.nodes)
        for p in parents:
            if p is not None and not 0 <= p < index:
                raise ContractError(f"Node [{kind}] refers to non-earlier node {p}")
        self.nodes.append(_OpNode(kind, parents, backward_fn, leaf))
        return index

    def backward(self, root: Tensor) -> Dict[str, numpy.ndarray]:
        if root._record is not self:
            raise ContractError("Root tensor was not produced through this record")
        if root.shape != (1, 1):
            raise ContractError(f"Backward requires a scalar root, got {root.shape}")
        if self._consumed:
            raise ContractError(
                _collapse_str_(
                    """
                    Backward has already been run on this record, call reset()
                    before propagating again.
                    """
                )
            )
        self._consumed = True

        self.nodes[root._node].grad = numpy.ones((1, 1))
        for index in range(root._node, -1, -1):
            node = self.nodes[index]
            if node.grad is None or node.leaf is not None:
                continue
            needs = tuple(p is not None for p in node.parents)
            for p, g in zip(node.parents, node.backward_fn(node.grad, needs)):
                if p is None or g is None:
                    continue
                target = self.nodes[p]
                if target.grad is None:
                    target.grad = numpy.array(g, dtype=numpy.float64)
                else:
                    target.grad += g

        table = {}
        for index, node in enumerate(self.nodes):
            if node.leaf is None or node.grad is None:
                continue
            node.leaf.grad = node.leaf.grad + node.grad
            table[node.leaf.name or f"leaf{index}"] = node.leaf.grad
        return table

    def reset(self) -> None:
        for node in self.nodes:
            node.grad = None
        self._consumed = False


def backward(root: Tensor) -> Dict[str, numpy.ndarray]:
    """Propagating gradients from a scalar root, see `DiffRecord.backward`"""
    if root._record is None:
        raise ContractError("Cannot run backward on a detached tensor")
    return root._record.backward(root)


def _emit(kind: str, data: numpy.ndarray, inputs, backward_fn: _BackwardFn) -> Tensor:
    _check_finite(kind, data)
    out = Tensor._wrap(data)
    record = None
    for t in inputs:
        if t._record is None:
            continue
        if record is None:
            record = t._record
        elif t._record is not record:
            raise ContractError(f"Operation [{kind}] mixes tensors of different records")
    if record is not None:
        out._record = record
        out._node = record._append(kind, tuple(t._node for t in inputs), backward_fn)
    return out


# Core operations


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.cols != b.rows:
        raise ShapeError(f"matmul: [{a.rows}x{a.cols}] x [{b.rows}x{b.cols}]")
    ad, bd = a.data, b.data

    def _backward(g, needs):
        return (g @ bd.T if needs[0] else None, ad.T @ g if needs[1] else None)

    return _emit("matmul", ad @ bd, (a, b), _backward)


def elementwise(a: Tensor, b: Tensor, kind: str) -> Tensor:
    """
    Elementwise add/sub/mul. Either operand may be a 1xn row that is broadcast
    over the rows of an mxn operand.
    """
    if kind not in ("add", "sub", "mul"):
        raise ContractError(f"Unknown elementwise kind [{kind}]")
    if a.cols != b.cols or (a.rows != b.rows and 1 not in (a.rows, b.rows)):
        raise ShapeError(f"elementwise {kind}: {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    rows = max(a.rows, b.rows)
    if kind == "add":
        data = ad + bd
    elif kind == "sub":
        data = ad - bd
    else:
        data = ad * bd

    def _fold(g, n_rows):
        # Column-sum for a broadcast row operand
        return g.sum(axis=0, keepdims=True) if n_rows != rows else g

    def _backward(g, needs):
        ga = gb = None
        if needs[0]:
            ga = _fold(g * bd if kind == "mul" else g, ad.shape[0])
        if needs[1]:
            if kind == "mul":
                gb = g * ad
            else:
                gb = -g if kind == "sub" else g
            gb = _fold(gb, bd.shape[0])
        return ga, gb

    return _emit(kind, data, (a, b), _backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    return elementwise(a, b, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    return elementwise(a, b, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    return elementwise(a, b, "mul")


def relu(a: Tensor) -> Tensor:
    """max(0, x), the subgradient at exactly zero is zero"""
    active = a.data > 0

    def _backward(g, needs):
        return (g * active,)

    return _emit("relu", numpy.where(active, a.data, 0.0), (a,), _backward)


def softmax_row(a: Tensor) -> Tensor:
    """Max-subtracted softmax applied to every row independently"""
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = numpy.exp(shifted)
    s = e / e.sum(axis=1, keepdims=True)

    def _backward(g, needs):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return _emit("softmax_row", s, (a,), _backward)


def reduce(a: Tensor, kind: str, axis: str) -> Tensor:
    """
    Sum or mean reduction. `axis="rows"` collapses the rows (mxn -> 1xn),
    `axis="cols"` collapses the columns (mxn -> mx1) and `axis="all"` returns
    a 1x1 tensor.
    """
    if kind not in ("sum", "mean"):
        raise ContractError(f"Unknown reduction kind [{kind}]")
    if axis == "rows":
        data, count = a.data.sum(axis=0, keepdims=True), a.rows
    elif axis == "cols":
        data, count = a.data.sum(axis=1, keepdims=True), a.cols
    elif axis == "all":
        data, count = numpy.array([[a.data.sum()]]), a.rows * a.cols
    else:
        raise ContractError(f"Unknown reduction axis [{axis}]")
    factor = 1.0 / count if kind == "mean" else 1.0
    shape = a.shape

    def _backward(g, needs):
        return (numpy.broadcast_to(g * factor, shape),)

    return _emit(f"{kind}_{axis}", data * factor, (a,), _backward)


def reduce_sum(a: Tensor, axis: str = "all") -> Tensor:
    return reduce(a, "sum", axis)


def reduce_mean(a: Tensor, axis: str = "all") -> Tensor:
    return reduce(a, "mean", axis)


def row_mask(a: Tensor, mask: Sequence[float]) -> Tensor:
    """Zeroing every row whose mask entry is 0, gradients of those rows are zero"""
    keep = numpy.asarray(mask, dtype=numpy.float64).reshape(-1)
    if keep.size != a.rows:
        raise ShapeError(f"row_mask: mask of length {keep.size} for {a.rows} rows")
    if not numpy.isin(keep, (0.0, 1.0)).all():
        raise ContractError("row_mask: mask must be binary")
    keep = keep[:, None] > 0

    def _backward(g, needs):
        return (numpy.where(keep, g, 0.0),)

    return _emit("row_mask", numpy.where(keep, a.data, 0.0), (a,), _backward)


# Structural and scalar helpers used by the model


def transpose(a: Tensor) -> Tensor:
    def _backward(g, needs):
        return (g.T,)

    return _emit("transpose", a.data.T.copy(), (a,), _backward)


def reshape(a: Tensor, rows: int, cols: int) -> Tensor:
    if rows * cols != a.rows * a.cols:
        raise ShapeError(f"reshape: {a.shape} -> ({rows}, {cols})")
    shape = a.shape

    def _backward(g, needs):
        return (g.reshape(shape),)

    return _emit("reshape", a.data.reshape(rows, cols).copy(), (a,), _backward)


def concat_cols(tensors: Sequence[Tensor]) -> Tensor:
    if len(tensors) == 0:
        raise ContractError("concat_cols: nothing to concatenate")
    if len({t.rows for t in tensors}) != 1:
        raise ShapeError(f"concat_cols: row mismatch {[t.shape for t in tensors]}")
    edges = numpy.cumsum([0] + [t.cols for t in tensors])

    def _backward(g, needs):
        return tuple(
            g[:, edges[i] : edges[i + 1]] if needs[i] else None
            for i in range(len(tensors))
        )

    data = numpy.hstack([t.data for t in tensors])
    return _emit("concat_cols", data, tuple(tensors), _backward)


def submatrix(a: Tensor, r0: int, r1: int, c0: int, c1: int) -> Tensor:
    if not (0 <= r0 < r1 <= a.rows and 0 <= c0 < c1 <= a.cols):
        raise ShapeError(f"submatrix [{r0}:{r1}, {c0}:{c1}] out of {a.shape}")
    shape = a.shape

    def _backward(g, needs):
        full = numpy.zeros(shape)
        full[r0:r1, c0:c1] = g
        return (full,)

    return _emit("submatrix", a.data[r0:r1, c0:c1].copy(), (a,), _backward)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def _backward(g, needs):
        return (g * c,)

    return _emit("scale", a.data * c, (a,), _backward)


def scalar_op(a: Tensor, s: Tensor, kind: str) -> Tensor:
    """Multiplying or dividing every entry of `a` by the 1x1 tensor `s`"""
    if s.shape != (1, 1):
        raise ShapeError(f"scalar_op: expected a 1x1 scalar, got {s.shape}")
    ad, sv = a.data, s.data[0, 0]
    if kind == "mul":
        data = ad * sv

        def _backward(g, needs):
            return (g * sv, numpy.array([[numpy.sum(g * ad)]]))

    elif kind == "div":
        with numpy.errstate(divide="ignore", invalid="ignore"):
            data = ad / sv

        def _backward(g, needs):
            return (g / sv, numpy.array([[-numpy.sum(g * ad) / (sv * sv)]]))

    else:
        raise ContractError(f"Unknown scalar_op kind [{kind}]")
    return _emit(f"scalar_{kind}", data, (a, s), _backward)


def extremum(a: Tensor, kind: str) -> Tensor:
    """Global min or max as 1x1, the gradient goes to the first extremal entry"""
    if kind == "max":
        index = int(numpy.argmax(a.data))
    elif kind == "min":
        index = int(numpy.argmin(a.data))
    else:
        raise ContractError(f"Unknown extremum kind [{kind}]")
    shape = a.shape

    def _backward(g, needs):
        full = numpy.zeros(shape)
        full.flat[index] = g[0, 0]
        return (full,)

    return _emit(kind, numpy.array([[a.data.flat[index]]]), (a,), _backward)


def log_clamped(a: Tensor, floor: float = 1e-12) -> Tensor:
    """log(max(x, floor)), with zero gradient wherever the clamp is active"""
    clamped = numpy.maximum(a.data, floor)
    live = a.data > floor

    def _backward(g, needs):
        return (numpy.where(live, g / clamped, 0.0),)

    return _emit("log_clamped", numpy.log(clamped), (a,), _backward)


# Finite difference utilities for gradient checks


def numerical_gradient(fn: Callable[[], float], tensor: Tensor, h: float = 1e-5):
    """
    Central differences of the scalar `fn()` with respect to every entry of
    `tensor`. The tensor storage is perturbed in place and always restored.
    """
    grad = numpy.zeros_like(tensor.data)
    for index in numpy.ndindex(*tensor.shape):
        orig = tensor.data[index]
        try:
            tensor.data[index] = orig + h
            f_plus = fn()
            tensor.data[index] = orig - h
            f_minus = fn()
        finally:
            tensor.data[index] = orig
        grad[index] = (f_plus - f_minus) / (2 * h)
    return grad


def relative_error(a: numpy.ndarray, b: numpy.ndarray) -> float:
    """max |a-b| / max(|a|, |b|, 1), evaluated elementwise"""
    a, b = numpy.asarray(a, dtype=float), numpy.asarray(b, dtype=float)
    denom = numpy.maximum(numpy.maximum(numpy.abs(a), numpy.abs(b)), 1.0)
    if a.size == 0:
        return 0.0
    return float(numpy.max(numpy.abs(a - b) / denom))
