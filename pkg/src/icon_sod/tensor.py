"""Dense tensors with reverse-mode automatic differentiation.

The engine covers exactly the operations the saliency network needs:
elementwise arithmetic, activations, reductions, matmul, shape surgery
(reshape / permute / concat / narrow / expand) plus the convolution,
normalization and resampling ops in :mod:`icon_sod.nn`.

Values are numpy arrays, float64 by default (float32 selectable per
tensor); the graph is the linked structure of ``Tensor`` objects, and
``backward()`` runs one reverse topological sweep over it.  Binary ops
require equal shapes -- there is no implicit broadcasting beyond scalars,
which catches wiring bugs early; use :func:`expand` to broadcast
explicitly.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError, GraphError

DEFAULT_DTYPE = np.float64

_grad_enabled = True


class no_grad:
    """Context manager that disables graph construction (inference mode)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """A dense n-d array that doubles as a node in the autodiff graph.

    Treat ``data`` as immutable once the tensor participates in a graph;
    parameter updates should go through ``.data`` only between graphs
    (e.g. inside ``no_grad`` in an optimizer step).
    """

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            raise TypeError("wrap raw array data, not another Tensor")
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = np.ascontiguousarray(arr)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._backward = None  # callable(out_grad) -> None, set by ops
        self._parents: tuple[Tensor, ...] = ()
        self._backward_ran = False

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.size != 1:
            raise DimensionError(f"item() needs a single-element tensor, got {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{flag})"

    # -- operators -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return permute(self, axes)

    # -- reverse sweep ---------------------------------------------------
    def backward(self) -> None:
        """Populate ``grad`` on every requires_grad ancestor of this scalar.

        The graph records executed ops through parent links; the sweep
        visits each node exactly once, after all of its consumers.  A
        second call on the same graph is rejected -- rebuild the forward
        pass instead of reusing stale intermediates.
        """
        if self.size != 1:
            raise GraphError(
                f"backward() needs a scalar loss, got shape {self.shape}"
            )

        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))

        if any(node._backward_ran for node in topo if node._backward is not None):
            raise GraphError(
                "backward() already ran through part of this graph; "
                "run a fresh forward pass"
            )

        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward_ran = True
                if node.grad is not None:
                    node._backward(node.grad)
        for node in topo:
            if node.requires_grad and node.grad is None:
                node.grad = np.zeros_like(node.data)


# -- op plumbing --------------------------------------------------------

def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    """Wrap an op result, recording graph links only when tracking is on."""
    track = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=track)
    if track:
        out._parents = parents
        out._backward = backward
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.requires_grad:
        t.grad = g.copy() if t.grad is None else t.grad + g


def _as_pair(a, b):
    """Coerce operands of a binary op; returns (ta, tb, a_is_scalar, b_is_scalar).

    A scalar is a python number or a single-element tensor; anything else
    must match shapes exactly.  Python scalars adopt the tensor operand's
    dtype so float32 graphs stay float32.
    """
    dtype = a.dtype if isinstance(a, Tensor) else b.dtype if isinstance(b, Tensor) else DEFAULT_DTYPE
    ta = a if isinstance(a, Tensor) else Tensor(np.asarray(a, dtype=dtype))
    tb = b if isinstance(b, Tensor) else Tensor(np.asarray(b, dtype=dtype))
    a_scalar = ta.size == 1
    b_scalar = tb.size == 1
    if ta.shape != tb.shape and not (a_scalar or b_scalar):
        raise DimensionError(
            f"binary op requires equal shapes (or a scalar): {ta.shape} vs {tb.shape}"
        )
    return ta, tb, a_scalar, b_scalar


def _reduce_to(g: np.ndarray, t: Tensor) -> np.ndarray:
    """Collapse a full-shape grad back to a scalar operand's shape."""
    if g.shape == t.shape:
        return g
    return np.sum(g).reshape(t.shape).astype(g.dtype)


# -- elementwise arithmetic ----------------------------------------------

def add(a, b) -> Tensor:
    ta, tb, _, _ = _as_pair(a, b)
    out_data = ta.data + tb.data

    def backward(g):
        _accumulate(ta, _reduce_to(g, ta))
        _accumulate(tb, _reduce_to(g, tb))

    return _make(out_data, (ta, tb), backward)


def sub(a, b) -> Tensor:
    ta, tb, _, _ = _as_pair(a, b)
    out_data = ta.data - tb.data

    def backward(g):
        _accumulate(ta, _reduce_to(g, ta))
        _accumulate(tb, _reduce_to(-g, tb))

    return _make(out_data, (ta, tb), backward)


def mul(a, b) -> Tensor:
    ta, tb, _, _ = _as_pair(a, b)
    out_data = ta.data * tb.data

    def backward(g):
        if ta.requires_grad:
            _accumulate(ta, _reduce_to(g * tb.data, ta))
        if tb.requires_grad:
            _accumulate(tb, _reduce_to(g * ta.data, tb))

    return _make(out_data, (ta, tb), backward)


def div(a, b) -> Tensor:
    ta, tb, _, _ = _as_pair(a, b)
    out_data = ta.data / tb.data

    def backward(g):
        if ta.requires_grad:
            _accumulate(ta, _reduce_to(g / tb.data, ta))
        if tb.requires_grad:
            _accumulate(tb, _reduce_to(-g * ta.data / (tb.data * tb.data), tb))

    return _make(out_data, (ta, tb), backward)


def neg(a: Tensor) -> Tensor:
    def backward(g):
        _accumulate(a, -g)

    return _make(-a.data, (a,), backward)


def power(a: Tensor, p: float) -> Tensor:
    p = float(p)
    out_data = a.data**p

    def backward(g):
        _accumulate(a, g * p * a.data ** (p - 1.0))

    return _make(out_data, (a,), backward)


# -- activations / pointwise nonlinearities -------------------------------

def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def backward(g):
        _accumulate(a, g * mask)

    return _make(a.data * mask, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    y = np.empty_like(x)
    pos = x >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)

    def backward(g):
        _accumulate(a, g * y * (1.0 - y))

    return _make(y, (a,), backward)


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)

    def backward(g):
        _accumulate(a, g * y)

    return _make(y, (a,), backward)


def log(a: Tensor) -> Tensor:
    def backward(g):
        _accumulate(a, g / a.data)

    return _make(np.log(a.data), (a,), backward)


def sqrt(a: Tensor) -> Tensor:
    y = np.sqrt(a.data)

    def backward(g):
        _accumulate(a, g * 0.5 / y)

    return _make(y, (a,), backward)


def clamp(a: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    y = np.clip(a.data, lo, hi)
    interior = np.ones(a.shape, dtype=bool)
    if lo is not None:
        interior &= a.data >= lo
    if hi is not None:
        interior &= a.data <= hi

    def backward(g):
        _accumulate(a, g * interior)

    return _make(y, (a,), backward)


# -- reductions -----------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    out_data = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        gk = g
        if not keepdims:
            shape = list(a.shape)
            for ax in axes:
                shape[ax] = 1
            gk = g.reshape(shape)
        _accumulate(a, np.broadcast_to(gk, a.shape).copy())

    return _make(out_data, (a,), backward)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    n = 1
    for ax in axes:
        n *= a.shape[ax]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# -- linear algebra ---------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product ``(..., m, k) @ (..., k, n)``.

    Leading dimensions must match exactly (broadcast with :func:`expand`
    first); this keeps the backward pass reduction-free.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul operands need at least 2 dims")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(
            f"matmul inner dims differ: {a.shape} @ {b.shape}"
        )
    if a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(
            f"matmul leading dims must match exactly: {a.shape} @ {b.shape}"
        )
    out_data = np.matmul(a.data, b.data)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, np.matmul(g, np.swapaxes(b.data, -1, -2)))
        if b.requires_grad:
            _accumulate(b, np.matmul(np.swapaxes(a.data, -1, -2), g))

    return _make(out_data, (a, b), backward)


# -- shape surgery -----------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out_data = a.data.reshape(shape)

    def backward(g):
        _accumulate(a, g.reshape(a.shape))

    return _make(out_data, (a,), backward)


def permute(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = np.argsort(axes)

    def backward(g):
        _accumulate(a, np.ascontiguousarray(g.transpose(inv)))

    return _make(np.ascontiguousarray(a.data.transpose(axes)), (a,), backward)


def concat(tensors, axis: int) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise DimensionError("concat needs at least one input")
    axis = axis % tensors[0].ndim
    ref = list(tensors[0].shape)
    for t in tensors[1:]:
        other = list(t.shape)
        ref_rest = ref[:axis] + ref[axis + 1 :]
        other_rest = other[:axis] + other[axis + 1 :]
        if ref_rest != other_rest:
            raise DimensionError(
                f"concat inputs disagree off axis {axis}: {tuple(ref)} vs {t.shape}"
            )
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            _accumulate(t, np.ascontiguousarray(piece))

    return _make(out_data, tuple(tensors), backward)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Slice ``length`` entries along ``axis`` starting at ``start``."""
    axis = axis % a.ndim
    if start < 0 or start + length > a.shape[axis]:
        raise DimensionError(
            f"narrow [{start}:{start + length}] out of range for axis {axis} "
            f"of shape {a.shape}"
        )
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)

    def backward(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[index] = g
            _accumulate(a, full)

    return _make(np.ascontiguousarray(a.data[index]), (a,), backward)


def expand(a: Tensor, shape) -> Tensor:
    """Materialize a broadcast: size-1 axes of ``a`` are tiled to ``shape``.

    The gradient sums back over the tiled axes.  New leading axes are not
    created; ``reshape`` to the right rank first.
    """
    shape = tuple(shape)
    if len(shape) != a.ndim:
        raise DimensionError(
            f"expand target rank {len(shape)} != input rank {a.ndim}"
        )
    grow = []
    for ax, (s_in, s_out) in enumerate(zip(a.shape, shape)):
        if s_in == s_out:
            continue
        if s_in != 1:
            raise DimensionError(
                f"expand axis {ax}: cannot grow extent {s_in} to {s_out}"
            )
        grow.append(ax)
    grow = tuple(grow)

    def backward(g):
        _accumulate(a, g.sum(axis=grow, keepdims=True))

    return _make(np.broadcast_to(a.data, shape).copy(), (a,), backward)


def softmax(a: Tensor, axis: int) -> Tensor:
    """Numerically stable softmax along one axis.

    Built from primitive ops; the max shift is detached, which is exact
    because softmax is invariant to constant shifts.
    """
    shift = Tensor(a.data.max(axis=axis, keepdims=True))
    e = exp(sub(a, expand(shift, a.shape)))
    denom = tsum(e, axis=axis, keepdims=True)
    return div(e, expand(denom, a.shape))
