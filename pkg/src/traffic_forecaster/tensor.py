"""Dense 64-bit tensor engine with a define-by-run tape for reverse-mode gradients.

Every primitive records a TapeEntry holding a forward function (used again by
``Tape.replay``) and a backward function mapping the output gradient to one
gradient per input. A new Tape is built for every training step.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import DimensionError, TapeError

logger = logging.getLogger(__name__)

DTYPE = np.float64

POINTWISE_OPS = ("relu", "sigmoid", "tanh", "abs", "square")
COMBINE_OPS = (
    "add",
    "subtract",
    "hadamard",
    "concat-columns",
    "scale-by-scalar",
    "reduce-mean",
    "reduce-sum",
)


class DiffTensor:
    """A dense real tensor, optionally recorded on a Tape.

    Attributes:
        values: float64 array holding the data (row-major)
        tape: the Tape that recorded this tensor, or None for a free-standing tensor
        index: position of the tensor in ``tape.tensors``
        name: parameter handle for leaves created with ``Tape.parameter``
        requires_grad: True for parameters (leaves whose gradient is returned)
    """

    __slots__ = ("values", "tape", "index", "name", "requires_grad")

    def __init__(self, values, name: Optional[str] = None, requires_grad: bool = False):
        self.values = np.array(values, dtype=DTYPE)
        self.tape: Optional["Tape"] = None
        self.index: Optional[int] = None
        self.name = name
        self.requires_grad = requires_grad

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return int(self.values.size)

    def item(self) -> float:
        if self.values.size != 1:
            raise TapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.values.reshape(-1)[0])

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"DiffTensor(shape={self.shape}{label})"


@dataclass
class TapeEntry:
    """One recorded primitive: output = forward_fn(*inputs)."""

    op: str
    inputs: Tuple[int, ...]
    output: int
    forward_fn: Callable[..., np.ndarray]
    backward_fn: Callable[..., Tuple[Optional[np.ndarray], ...]]


class Tape:
    """Ordered record of primitive operations.

    Tensors are appended in creation order, so every entry's inputs precede it.
    """

    def __init__(self) -> None:
        self.tensors: List[DiffTensor] = []
        self.entries: List[TapeEntry] = []

    def __len__(self) -> int:
        return len(self.entries)

    def _register(self, tensor: DiffTensor) -> DiffTensor:
        tensor.tape = self
        tensor.index = len(self.tensors)
        self.tensors.append(tensor)
        return tensor

    def parameter(self, name: str, values) -> DiffTensor:
        """Register a learnable leaf. Its gradient is reported by ``backward``."""
        return self._register(DiffTensor(values, name=name, requires_grad=True))

    def constant(self, values) -> DiffTensor:
        """Register a leaf that receives no gradient (data, Laplacians, masks)."""
        return self._register(DiffTensor(values))

    def parameters(self) -> Dict[str, DiffTensor]:
        return {t.name: t for t in self.tensors if t.requires_grad}

    def record(
        self,
        op: str,
        inputs: Sequence[DiffTensor],
        forward_fn: Callable[..., np.ndarray],
        backward_fn: Callable[..., Tuple[Optional[np.ndarray], ...]],
    ) -> DiffTensor:
        out = DiffTensor(forward_fn(*(t.values for t in inputs)))
        self._register(out)
        self.entries.append(
            TapeEntry(
                op=op,
                inputs=tuple(t.index for t in inputs),
                output=out.index,
                forward_fn=forward_fn,
                backward_fn=backward_fn,
            )
        )
        return out

    def replay(self) -> List[np.ndarray]:
        """Recompute every recorded output from the leaves, in tape order.

        Returns:
            The recomputed output arrays, one per entry (the stored values are untouched)
        """
        values = [t.values for t in self.tensors]
        replayed = []
        for entry in self.entries:
            out = entry.forward_fn(*(values[i] for i in entry.inputs))
            values[entry.output] = out
            replayed.append(out)
        return replayed


def _tape_of(inputs: Sequence[DiffTensor]) -> Optional[Tape]:
    tape = None
    for t in inputs:
        if t.tape is None:
            continue
        if tape is None:
            tape = t.tape
        elif t.tape is not tape:
            raise TapeError("operands belong to different tapes")
    return tape


def _apply(
    op: str,
    inputs: Sequence[DiffTensor],
    forward_fn: Callable[..., np.ndarray],
    backward_fn: Callable[..., Tuple[Optional[np.ndarray], ...]],
) -> DiffTensor:
    """Evaluate an op, recording it when any operand lives on a tape.

    Free-standing operands (no tape) are adopted by the tape as constants.
    """
    tape = _tape_of(inputs)
    if tape is None:
        return DiffTensor(forward_fn(*(t.values for t in inputs)))
    inputs = [t if t.tape is tape else tape.constant(t.values) for t in inputs]
    return tape.record(op, inputs, forward_fn, backward_fn)


def as_tensor(x) -> DiffTensor:
    return x if isinstance(x, DiffTensor) else DiffTensor(x)


def _require_2d(op: str, *tensors: DiffTensor) -> None:
    for t in tensors:
        if t.values.ndim != 2:
            raise DimensionError(f"{op} expects 2-D operands, got shape {t.shape}")


# --- matmul -------------------------------------------------------------------


def matmul(a: DiffTensor, b: DiffTensor) -> DiffTensor:
    """Matrix product of an m×k and a k×n tensor."""
    a, b = as_tensor(a), as_tensor(b)
    _require_2d("matmul", a, b)
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} · {b.shape}")

    def backward(g, av, bv, _out):
        return g @ bv.T, av.T @ g

    return _apply("matmul", [a, b], lambda av, bv: av @ bv, backward)


# --- pointwise ----------------------------------------------------------------


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


_POINTWISE: Dict[str, Tuple[Callable, Callable]] = {
    "relu": (lambda x: np.where(x > 0, x, 0.0), lambda g, x, y: g * (x > 0)),
    "sigmoid": (_sigmoid, lambda g, x, y: g * y * (1.0 - y)),
    "tanh": (np.tanh, lambda g, x, y: g * (1.0 - y * y)),
    "abs": (np.abs, lambda g, x, y: g * np.sign(x)),
    "square": (np.square, lambda g, x, y: g * 2.0 * x),
}


def pointwise(op: str, x: DiffTensor) -> DiffTensor:
    """Elementwise relu, sigmoid, tanh, abs or square.

    relu'(0) and abs'(0) are 0.
    """
    if op not in _POINTWISE:
        raise ValueError(f"unknown pointwise op {op!r}; expected one of {POINTWISE_OPS}")
    fwd, bwd = _POINTWISE[op]
    return _apply(op, [as_tensor(x)], fwd, lambda g, xv, out: (bwd(g, xv, out),))


def relu(x: DiffTensor) -> DiffTensor:
    return pointwise("relu", x)


def sigmoid(x: DiffTensor) -> DiffTensor:
    return pointwise("sigmoid", x)


def tanh(x: DiffTensor) -> DiffTensor:
    return pointwise("tanh", x)


def absolute(x: DiffTensor) -> DiffTensor:
    return pointwise("abs", x)


def square(x: DiffTensor) -> DiffTensor:
    return pointwise("square", x)


# --- combine ------------------------------------------------------------------


def _is_row_over_rows(a: DiffTensor, b: DiffTensor) -> bool:
    """True when b is a row vector ((C,) or (1, C)) to be added to every row of a (M, C)."""
    if a.values.ndim != 2:
        return False
    return b.shape == (a.shape[1],) or b.shape == (1, a.shape[1])


def _check_same_or_row(op: str, a: DiffTensor, b: DiffTensor) -> bool:
    if a.shape == b.shape:
        return False
    if _is_row_over_rows(a, b):
        return True
    raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} are not compatible")


def add(a: DiffTensor, b: DiffTensor) -> DiffTensor:
    """a + b for equal shapes, or a row vector b added to every row of a."""
    a, b = as_tensor(a), as_tensor(b)
    row = _check_same_or_row("add", a, b)
    b_shape = b.shape

    def backward(g, _av, _bv, _out):
        gb = g.sum(axis=0).reshape(b_shape) if row else g
        return g, gb

    return _apply("add", [a, b], lambda av, bv: av + bv, backward)


def subtract(a: DiffTensor, b: DiffTensor) -> DiffTensor:
    """a - b with the same shape rules as ``add``."""
    a, b = as_tensor(a), as_tensor(b)
    row = _check_same_or_row("subtract", a, b)
    b_shape = b.shape

    def backward(g, _av, _bv, _out):
        gb = -g.sum(axis=0).reshape(b_shape) if row else -g
        return g, gb

    return _apply("subtract", [a, b], lambda av, bv: av - bv, backward)


def hadamard(a: DiffTensor, b: DiffTensor) -> DiffTensor:
    """Elementwise product; shapes must match exactly."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"hadamard: shapes {a.shape} and {b.shape} differ")
    return _apply(
        "hadamard", [a, b], lambda av, bv: av * bv, lambda g, av, bv, _out: (g * bv, g * av)
    )


def concat_columns(*tensors: DiffTensor) -> DiffTensor:
    """Join 2-D tensors with equal row counts side by side."""
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat-columns needs at least one operand")
    _require_2d("concat-columns", *tensors)
    rows = tensors[0].shape[0]
    if any(t.shape[0] != rows for t in tensors):
        raise DimensionError(
            f"concat-columns: row counts differ {[t.shape for t in tensors]}"
        )
    splits = np.cumsum([t.shape[1] for t in tensors])[:-1]

    def backward(g, *args):
        return tuple(np.split(g, splits, axis=1))

    return _apply(
        "concat-columns", tensors, lambda *vs: np.concatenate(vs, axis=1), backward
    )


def scale(x: DiffTensor, factor: float) -> DiffTensor:
    """Multiply every entry by a constant scalar."""
    factor = float(factor)
    return _apply(
        "scale-by-scalar",
        [as_tensor(x)],
        lambda xv: xv * factor,
        lambda g, _xv, _out: (g * factor,),
    )


def reduce_sum(x: DiffTensor) -> DiffTensor:
    """Sum of all entries as a 0-d tensor."""
    x = as_tensor(x)
    shape = x.shape
    return _apply(
        "reduce-sum",
        [x],
        lambda xv: np.array(xv.sum()),
        lambda g, _xv, _out: (np.full(shape, float(g)),),
    )


def reduce_mean(x: DiffTensor) -> DiffTensor:
    """Mean of all entries as a 0-d tensor."""
    x = as_tensor(x)
    shape, n = x.shape, x.size
    return _apply(
        "reduce-mean",
        [x],
        lambda xv: np.array(xv.sum() / n),
        lambda g, _xv, _out: (np.full(shape, float(g) / n),),
    )


def combine(op: str, *inputs: DiffTensor, factor: float = None) -> DiffTensor:
    """Dispatch one of the combining operations by name."""
    if op == "add":
        return add(*inputs)
    if op == "subtract":
        return subtract(*inputs)
    if op == "hadamard":
        return hadamard(*inputs)
    if op == "concat-columns":
        return concat_columns(*inputs)
    if op == "scale-by-scalar":
        if factor is None:
            raise ValueError("scale-by-scalar needs a factor")
        return scale(inputs[0], factor)
    if op == "reduce-mean":
        return reduce_mean(inputs[0])
    if op == "reduce-sum":
        return reduce_sum(inputs[0])
    raise ValueError(f"unknown combine op {op!r}; expected one of {COMBINE_OPS}")


# --- structural ---------------------------------------------------------------


def reshape(x: DiffTensor, shape: Tuple[int, ...]) -> DiffTensor:
    """Row-major reshape; the entry count must not change."""
    x = as_tensor(x)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.size:
        raise DimensionError(f"reshape: cannot view {x.shape} as {shape}")
    old = x.shape
    return _apply(
        "reshape", [x], lambda xv: xv.reshape(shape), lambda g, _xv, _out: (g.reshape(old),)
    )


def tile_rows(x: DiffTensor, reps: int) -> DiffTensor:
    """Stack ``reps`` copies of a 2-D tensor vertically."""
    x = as_tensor(x)
    _require_2d("tile-rows", x)
    rows = x.shape[0]

    def backward(g, _xv, _out):
        return (g.reshape(reps, rows, -1).sum(axis=0),)

    return _apply("tile-rows", [x], lambda xv: np.tile(xv, (reps, 1)), backward)


# --- backward -----------------------------------------------------------------


def backward(tape: Tape, output: DiffTensor) -> Dict[str, np.ndarray]:
    """Reverse pass from a scalar output.

    Args:
        tape: the tape that recorded ``output``
        output: single-element tensor produced on ``tape``

    Returns:
        Gradient of output with respect to every parameter registered on the tape,
        keyed by parameter name. Parameters the output does not depend on get zeros.

    Raises:
        TapeError: output is not a scalar, or was not recorded on this tape
    """
    if output.size != 1:
        raise TapeError(f"backward needs a scalar output, got shape {output.shape}")
    if output.tape is not tape or output.index is None:
        raise TapeError("output tensor is not on the given tape")

    grads: Dict[int, np.ndarray] = {output.index: np.ones(output.shape)}
    values = tape.tensors
    for entry in reversed(tape.entries):
        g = grads.pop(entry.output, None)
        if g is None:
            continue
        input_values = [values[i].values for i in entry.inputs]
        input_grads = entry.backward_fn(g, *input_values, values[entry.output].values)
        for idx, ig in zip(entry.inputs, input_grads):
            if ig is None:
                continue
            if idx in grads:
                grads[idx] = grads[idx] + ig
            else:
                grads[idx] = ig

    result = {}
    for tensor in values:
        if tensor.requires_grad:
            g = grads.get(tensor.index)
            result[tensor.name] = (
                np.zeros(tensor.shape) if g is None else np.asarray(g).reshape(tensor.shape)
            )
    return result


def numerical_gradient(
    loss_fn: Callable[[Dict[str, np.ndarray]], float],
    params: Dict[str, np.ndarray],
    name: str,
    step: float = 1e-5,
) -> np.ndarray:
    """Central finite-difference gradient of ``loss_fn`` with respect to ``params[name]``.

    ``params`` is perturbed in place and restored after each evaluation.
    """
    target = params[name]
    grad = np.zeros_like(target)
    flat = target.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = loss_fn(params)
        flat[i] = orig - step
        down = loss_fn(params)
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * step)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """max |a - n| / max(|a|, |n|, floor), elementwise."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    if analytic.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / denom))
