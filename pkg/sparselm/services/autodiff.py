import logging
import threading
from typing import Callable, Dict, List, Optional, Sequence, Union

import numpy as np
from scipy.special import expit, logsumexp

from sparselm.errors import CorpusError, ShapeMismatchError

log = logging.getLogger("autodiff")


class Tensor:
    """Dense float64 array with a gradient slot.

    Leaves created with ``requires_grad=True`` are trainable parameters.
    Results of operations only require gradients when they were recorded
    on an active :class:`Tape`.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self._op = ""

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    def zero_grad(self) -> None:
        self.grad = None

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"


class Tape:
    """Ordered record of the operations executed while it is active.

    Nodes are appended in execution order, which is a topological order.
    """

    def __init__(self) -> None:
        self.nodes: List[Tensor] = []
        self._leaves: Dict[int, Tensor] = {}

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def leaves(self) -> List[Tensor]:
        return list(self._leaves.values())

    def __len__(self) -> int:
        return len(self.nodes)


_local = threading.local()


def _tape_stack() -> List[Tape]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> Optional[Tape]:
    stack = _tape_stack()
    return stack[-1] if stack else None


TensorLike = Union[Tensor, np.ndarray, float]


def as_tensor(value: TensorLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _record(out: Tensor, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    tape = active_tape()
    if tape is None:
        return out
    tracked = [p for p in parents if p.requires_grad]
    if not tracked:
        return out
    for p in tracked:
        if p._backward is None:
            tape._leaves.setdefault(id(p), p)
    out.requires_grad = True
    out._backward = backward_fn
    out._op = op
    tape.nodes.append(out)
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    # grads are always owned arrays so partial in-place updates stay local
    t.grad = np.array(g, dtype=np.float64) if t.grad is None else t.grad + g


def _grad_buffer(t: Tensor) -> np.ndarray:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    return t.grad


def _check(cond: bool, message: str) -> None:
    if not cond:
        raise ShapeMismatchError(message)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check(a.data.ndim == 2 and b.data.ndim == 2, f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    _check(a.shape[1] == b.shape[0], f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data)

    def _backward(g):
        _accumulate(a, g @ b.data.T)
        _accumulate(b, a.data.T @ g)

    return _record(out, (a, b), _backward, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """x @ weight.T (+ bias), weight stored as (out, in)."""
    x, weight = as_tensor(x), as_tensor(weight)
    _check(x.data.ndim == 2 and weight.data.ndim == 2, f"linear needs 2-D operands, got {x.shape} and {weight.shape}")
    _check(x.shape[1] == weight.shape[1], f"linear input width {x.shape[1]} != weight columns {weight.shape[1]}")
    data = x.data @ weight.data.T
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        _check(bias.shape == (weight.shape[0],), f"bias shape {bias.shape} != ({weight.shape[0]},)")
        data = data + bias.data
        parents.append(bias)
    out = Tensor(data)

    def _backward(g):
        _accumulate(x, g @ weight.data)
        _accumulate(weight, g.T @ x.data)
        if bias is not None:
            _accumulate(bias, g.sum(axis=0))

    return _record(out, parents, _backward, "linear")


def add(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape == b.shape:
        out = Tensor(a.data + b.data)

        def _backward(g):
            _accumulate(a, g)
            _accumulate(b, g)

        return _record(out, (a, b), _backward, "add")

    # bias-vector case only
    _check(
        b.data.ndim == 1 and a.data.ndim >= 1 and a.shape[-1] == b.shape[0],
        f"add operands are not broadcastable: {a.shape} + {b.shape}",
    )
    out = Tensor(a.data + b.data)

    def _backward_bias(g):
        _accumulate(a, g)
        _accumulate(b, g.reshape(-1, b.shape[0]).sum(axis=0))

    return _record(out, (a, b), _backward_bias, "add_bias")


def sub(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check(a.shape == b.shape, f"sub needs equal shapes: {a.shape} - {b.shape}")
    out = Tensor(a.data - b.data)

    def _backward(g):
        _accumulate(a, g)
        _accumulate(b, -g)

    return _record(out, (a, b), _backward, "sub")


def mul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check(a.shape == b.shape, f"mul needs equal shapes: {a.shape} * {b.shape}")
    out = Tensor(a.data * b.data)

    def _backward(g):
        _accumulate(a, g * b.data)
        _accumulate(b, g * a.data)

    return _record(out, (a, b), _backward, "mul")


def scale(a: Tensor, factor: float) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data * factor)

    def _backward(g):
        _accumulate(a, g * factor)

    return _record(out, (a,), _backward, "scale")


def sigmoid(a: Tensor) -> Tensor:
    a = as_tensor(a)
    value = expit(a.data)
    out = Tensor(value)

    def _backward(g):
        _accumulate(a, g * value * (1.0 - value))

    return _record(out, (a,), _backward, "sigmoid")


def tanh(a: Tensor) -> Tensor:
    a = as_tensor(a)
    value = np.tanh(a.data)
    out = Tensor(value)

    def _backward(g):
        _accumulate(a, g * (1.0 - value * value))

    return _record(out, (a,), _backward, "tanh")


_ELEMENTWISE = {
    "add": add,
    "mul": mul,
    "sigmoid": sigmoid,
    "tanh": tanh,
}


def elementwise(op: str, *operands: TensorLike) -> Tensor:
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"Unknown elementwise op: {op}") from None
    return fn(*operands)


def total(a: Tensor) -> Tensor:
    """Sum of all entries as a scalar tensor."""
    a = as_tensor(a)
    out = Tensor(np.sum(a.data))

    def _backward(g):
        _accumulate(a, np.full_like(a.data, float(g)))

    return _record(out, (a,), _backward, "sum")


def transpose(a: Tensor) -> Tensor:
    a = as_tensor(a)
    _check(a.data.ndim == 2, f"transpose needs a matrix, got {a.shape}")
    out = Tensor(a.data.T.copy())

    def _backward(g):
        _accumulate(a, g.T)

    return _record(out, (a,), _backward, "transpose")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    _check(len(tensors) > 0, "concat needs at least one tensor")
    if len(tensors) == 1:
        return tensors[0]
    ndim = tensors[0].data.ndim
    ax = axis % ndim
    for t in tensors[1:]:
        _check(
            t.data.ndim == ndim and all(t.shape[d] == tensors[0].shape[d] for d in range(ndim) if d != ax),
            f"concat shapes disagree outside axis {axis}: {[t.shape for t in tensors]}",
        )
    out = Tensor(np.concatenate([t.data for t in tensors], axis=ax))
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def _backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                index = [slice(None)] * ndim
                index[ax] = slice(int(lo), int(hi))
                _accumulate(t, g[tuple(index)])

    return _record(out, tensors, _backward, "concat")


def slice_columns(a: Tensor, start: int, stop: int) -> Tensor:
    """Columns [start, stop) along the last axis."""
    a = as_tensor(a)
    _check(0 <= start < stop <= a.shape[-1], f"column slice [{start}, {stop}) outside width {a.shape[-1]}")
    out = Tensor(a.data[..., start:stop].copy())

    def _backward(g):
        if a.requires_grad:
            _grad_buffer(a)[..., start:stop] += g

    return _record(out, (a,), _backward, "slice")


def take_rows(table: Tensor, ids, mask: Optional[np.ndarray] = None) -> Tensor:
    """Gather table rows for ``ids``; with ``mask`` only its ones carry values and gradients."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64).reshape(-1)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise CorpusError(f"row id out of range [0, {table.shape[0]}): min={ids.min()}, max={ids.max()}")
    rows_mask = None if mask is None else mask[ids]
    data = table.data[ids]
    if rows_mask is not None:
        data = data * rows_mask
    out = Tensor(data)

    def _backward(g):
        if table.requires_grad:
            np.add.at(_grad_buffer(table), ids, g if rows_mask is None else g * rows_mask)

    return _record(out, (table,), _backward, "take_rows")


def detach(a: Tensor) -> Tensor:
    """Copy of the values, cut from any tape (truncated BPTT boundary)."""
    return Tensor(as_tensor(a).data.copy())


def softmax_cross_entropy(logits: Tensor, targets, weights: Optional[np.ndarray] = None) -> Tensor:
    """Mean negative log-likelihood of ``targets`` under softmax(logits).

    ``weights`` (0/1 per row) excludes rows from the mean.
    """
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    _check(logits.data.ndim == 2, f"logits must be (batch, classes), got {logits.shape}")
    n, classes = logits.shape
    _check(targets.shape[0] == n, f"{targets.shape[0]} targets for {n} logit rows")
    if n and (targets.min() < 0 or targets.max() >= classes):
        raise CorpusError(f"target index out of range [0, {classes})")
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64).reshape(-1)
    denom = max(float(w.sum()), 1.0)

    log_z = logsumexp(logits.data, axis=1)
    picked = logits.data[np.arange(n), targets]
    nll = log_z - picked
    out = Tensor(np.sum(w * nll) / denom)

    def _backward(g):
        probs = np.exp(logits.data - log_z[:, None])
        probs[np.arange(n), targets] -= 1.0
        _accumulate(logits, probs * (w[:, None] * (float(g) / denom)))

    return _record(out, (logits,), _backward, "softmax_xent")


def backward(tape: Tape, loss: Tensor) -> List[Tensor]:
    """Reverse sweep over ``tape``; returns the parameter leaves that received gradients."""
    if loss.data.size != 1:
        raise ShapeMismatchError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return []
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        if node.grad is not None and node._backward is not None:
            node._backward(node.grad)
    return [leaf for leaf in tape.leaves() if leaf.grad is not None]


def zero_grad(parameters) -> None:
    for p in parameters:
        p.grad = None
