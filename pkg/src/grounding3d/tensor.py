"""Dense float64 tensors with reverse-mode automatic differentiation.

Everything numeric in this package flows through `Tensor`. Values are
immutable once constructed; every op validates finiteness so NaN/Inf
surface at the op that produced them instead of poisoning a training run.
Broadcasting is deliberately narrow: scalars, plus row/column vector
expansion against a matrix. That keeps every gradient rule obvious.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes violate an op's contract."""


class NonFiniteError(ArithmeticError):
    """A NaN or Inf appeared in an op result (or constructor input)."""


# grad_fn: upstream gradient -> one gradient array (or None) per parent
GradFn = Callable[[np.ndarray], tuple]


class Tensor:
    """A read-only float64 array plus the graph edge that produced it."""

    __slots__ = ("data", "parents", "grad_fn", "trainable", "name")

    def __init__(self, data, trainable: bool = False, name: str | None = None,
                 _parents: tuple = (), _grad_fn: GradFn | None = None):
        arr = np.array(data, dtype=np.float64, order="C")
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite values in tensor{' ' + name if name else ''}")
        arr.setflags(write=False)
        self.data = arr
        self.parents = _parents
        self.grad_fn = _grad_fn
        self.trainable = trainable
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single value, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    # operator sugar; all arithmetic lives in the module-level functions
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)


_SCALAR_CACHE: dict[float, Tensor] = {}


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, (int, float)):
        key = float(x)
        cached = _SCALAR_CACHE.get(key)
        if cached is None:
            if len(_SCALAR_CACHE) > 4096:
                _SCALAR_CACHE.clear()
            cached = _SCALAR_CACHE[key] = Tensor(key)
        return cached
    return Tensor(x)


def _result(data, parents, grad_fn) -> Tensor:
    """Wrap a freshly computed array without the defensive copy."""
    arr = np.asarray(data, dtype=np.float64)
    if not np.isfinite(arr).all():
        raise NonFiniteError("non-finite values in op result")
    if arr.flags.writeable:
        arr.setflags(write=False)
    out = Tensor.__new__(Tensor)
    out.data = arr
    out.parents = tuple(parents)
    out.grad_fn = grad_fn
    out.trainable = False
    out.name = None
    return out


def _expand_info(a_shape, b_shape):
    """Classify the limited broadcast between two shapes.

    Returns (out_shape, reduce_a, reduce_b) where reduce_* is the axis to
    sum a gradient over to undo the expansion, or None for no expansion.
    """
    if a_shape == b_shape:
        return a_shape, None, None
    if a_shape == ():
        return b_shape, "all", None
    if b_shape == ():
        return a_shape, None, "all"
    if len(a_shape) == 2 and len(b_shape) == 2:
        m, n = max(a_shape[0], b_shape[0]), max(a_shape[1], b_shape[1])
        ok_a = a_shape in ((m, n), (1, n), (m, 1))
        ok_b = b_shape in ((m, n), (1, n), (m, 1))
        if ok_a and ok_b and (m, n) in (a_shape, b_shape):
            reduce_a = None if a_shape == (m, n) else (0 if a_shape[0] == 1 else 1)
            reduce_b = None if b_shape == (m, n) else (0 if b_shape[0] == 1 else 1)
            return (m, n), reduce_a, reduce_b
    raise ShapeError(f"shapes {a_shape} and {b_shape} do not align "
                     "(only scalar and row/column expansion are supported)")


def _unexpand(grad: np.ndarray, shape, reduce_axis):
    if reduce_axis is None:
        return grad
    if reduce_axis == "all":
        return np.sum(grad).reshape(shape)
    return np.sum(grad, axis=reduce_axis, keepdims=True)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _, ra, rb = _expand_info(a.shape, b.shape)

    def grad_fn(up):
        return _unexpand(up, a.shape, ra), _unexpand(up, b.shape, rb)

    return _result(a.data + b.data, (a, b), grad_fn)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _, ra, rb = _expand_info(a.shape, b.shape)

    def grad_fn(up):
        return _unexpand(up, a.shape, ra), _unexpand(-up, b.shape, rb)

    return _result(a.data - b.data, (a, b), grad_fn)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _, ra, rb = _expand_info(a.shape, b.shape)

    def grad_fn(up):
        return (_unexpand(up * b.data, a.shape, ra),
                _unexpand(up * a.data, b.shape, rb))

    return _result(a.data * b.data, (a, b), grad_fn)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _, ra, rb = _expand_info(a.shape, b.shape)

    def grad_fn(up):
        return (_unexpand(up / b.data, a.shape, ra),
                _unexpand(-up * a.data / (b.data * b.data), b.shape, rb))

    return _result(a.data / b.data, (a, b), grad_fn)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _result(-a.data, (a,), lambda up: (-up,))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if len(a.shape) != 2 or len(b.shape) != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} vs {b.shape}")

    def grad_fn(up):
        return up @ b.data.T, a.data.T @ up

    return _result(a.data @ b.data, (a, b), grad_fn)


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if len(a.shape) != 2:
        raise ShapeError(f"transpose needs a 2-D tensor, got {a.shape}")
    return _result(a.data.T, (a,), lambda up: (up.T,))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    if int(np.prod(shape)) != a.size:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}")
    return _result(a.data.reshape(shape), (a,), lambda up: (up.reshape(a.shape),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0.0

    def grad_fn(up):
        return (up * mask,)

    return _result(np.where(mask, a.data, 0.0), (a,), grad_fn)


def absolute(a) -> Tensor:
    a = as_tensor(a)
    sign = np.sign(a.data)
    return _result(np.abs(a.data), (a,), lambda up: (up * sign,))


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0.0):
        raise NonFiniteError("log of a non-positive value")
    return _result(np.log(a.data), (a,), lambda up: (up / a.data,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.exp(a.data)

    def grad_fn(up):
        return (up * out_data,)

    return _result(out_data, (a,), grad_fn)


def power(a, p: float) -> Tensor:
    """Elementwise a**p for a constant exponent; a must be >= 0 when p is fractional."""
    a = as_tensor(a)
    if p != int(p) and np.any(a.data < 0.0):
        raise NonFiniteError(f"fractional power {p} of a negative value")
    out_data = np.power(a.data, p)

    def grad_fn(up):
        with np.errstate(divide="ignore", invalid="ignore"):
            d = p * np.power(a.data, p - 1.0)
        d = np.where(np.isfinite(d), d, 0.0)
        return (up * d,)

    return _result(out_data, (a,), grad_fn)


def maximum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _, ra, rb = _expand_info(a.shape, b.shape)
    take_a = np.broadcast_to(a.data, np.broadcast_shapes(a.shape, b.shape)) >= \
        np.broadcast_to(b.data, np.broadcast_shapes(a.shape, b.shape))

    def grad_fn(up):
        return (_unexpand(up * take_a, a.shape, ra),
                _unexpand(up * ~take_a, b.shape, rb))

    return _result(np.maximum(a.data, b.data), (a, b), grad_fn)


def minimum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _, ra, rb = _expand_info(a.shape, b.shape)
    take_a = np.broadcast_to(a.data, np.broadcast_shapes(a.shape, b.shape)) <= \
        np.broadcast_to(b.data, np.broadcast_shapes(a.shape, b.shape))

    def grad_fn(up):
        return (_unexpand(up * take_a, a.shape, ra),
                _unexpand(up * ~take_a, b.shape, rb))

    return _result(np.minimum(a.data, b.data), (a, b), grad_fn)


def total(a) -> Tensor:
    """Sum of all elements, as a scalar tensor."""
    a = as_tensor(a)
    return _result(np.sum(a.data), (a,), lambda up: (np.broadcast_to(up, a.shape).copy(),))


def mean(a) -> Tensor:
    a = as_tensor(a)
    n = a.size

    def grad_fn(up):
        return (np.broadcast_to(up / n, a.shape).copy(),)

    return _result(np.mean(a.data), (a,), grad_fn)


def sum_rows(a) -> Tensor:
    """Row sums of a matrix, kept as an (m, 1) column."""
    a = as_tensor(a)
    if len(a.shape) != 2:
        raise ShapeError(f"sum_rows needs a 2-D tensor, got {a.shape}")

    def grad_fn(up):
        return (np.broadcast_to(up, a.shape).copy(),)

    return _result(np.sum(a.data, axis=1, keepdims=True), (a,), grad_fn)


def softmax_rows(a) -> Tensor:
    """Row-wise softmax. Each output row is nonnegative and sums to 1."""
    a = as_tensor(a)
    if len(a.shape) != 2:
        raise ShapeError(f"softmax_rows needs a 2-D tensor, got {a.shape}")
    shifted = a.data - np.max(a.data, axis=1, keepdims=True)
    e = np.exp(shifted)
    s = e / np.sum(e, axis=1, keepdims=True)

    def grad_fn(up):
        dot = np.sum(up * s, axis=1, keepdims=True)
        return (s * (up - dot),)

    return _result(s, (a,), grad_fn)


def log_softmax_rows(a) -> Tensor:
    """Row-wise log softmax, computed via a detached max shift for stability."""
    a = as_tensor(a)
    if len(a.shape) != 2:
        raise ShapeError(f"log_softmax_rows needs a 2-D tensor, got {a.shape}")
    shifted = a.data - np.max(a.data, axis=1, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=1, keepdims=True))
    out_data = shifted - lse
    s = np.exp(out_data)

    def grad_fn(up):
        return (up - s * np.sum(up, axis=1, keepdims=True),)

    return _result(out_data, (a,), grad_fn)


def slice_cols(a, start: int, stop: int) -> Tensor:
    a = as_tensor(a)
    if len(a.shape) != 2:
        raise ShapeError(f"slice_cols needs a 2-D tensor, got {a.shape}")
    if not (0 <= start < stop <= a.shape[1]):
        raise ShapeError(f"column slice [{start}:{stop}) out of range for {a.shape}")

    def grad_fn(up):
        g = np.zeros(a.shape)
        g[:, start:stop] = up
        return (g,)

    return _result(a.data[:, start:stop].copy(), (a,), grad_fn)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat_cols needs at least one tensor")
    rows = parts[0].shape[0]
    if any(len(p.shape) != 2 or p.shape[0] != rows for p in parts):
        raise ShapeError(f"concat_cols row counts differ: {[p.shape for p in parts]}")
    widths = [p.shape[1] for p in parts]
    offsets = np.cumsum([0] + widths)

    def grad_fn(up):
        return tuple(up[:, offsets[i]:offsets[i + 1]].copy() for i in range(len(parts)))

    return _result(np.concatenate([p.data for p in parts], axis=1), tuple(parts), grad_fn)


def gather_rows(a, indices: Sequence[int]) -> Tensor:
    """Pick one column entry per row: out[i, 0] = a[i, indices[i]]."""
    a = as_tensor(a)
    if len(a.shape) != 2:
        raise ShapeError(f"gather_rows needs a 2-D tensor, got {a.shape}")
    idx = np.asarray(indices, dtype=np.intp)
    if idx.shape != (a.shape[0],):
        raise ShapeError(f"need one index per row: {idx.shape} vs {a.shape}")
    if np.any(idx < 0) or np.any(idx >= a.shape[1]):
        raise ShapeError(f"gather index out of range for {a.shape}")
    rows = np.arange(a.shape[0])

    def grad_fn(up):
        g = np.zeros(a.shape)
        g[rows, idx] = up[:, 0]
        return (g,)

    return _result(a.data[rows, idx].reshape(-1, 1), (a,), grad_fn)


class GradTape:
    """Topologically ordered record of the ops reachable from one output.

    The traversal visits each node exactly once; leaves that never fed the
    output get zero gradients.
    """

    def __init__(self, output: Tensor):
        self.output = output
        self.nodes: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                self.nodes.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                if id(p) not in seen:
                    stack.append((p, False))

    def gradients(self) -> dict[int, np.ndarray]:
        """Accumulated gradient per node id, seeded with d(output)/d(output) = 1."""
        if self.output.size != 1:
            raise ShapeError(f"backward needs a scalar output, got shape {self.output.shape}")
        grads: dict[int, np.ndarray] = {id(self.output): np.ones(self.output.shape)}
        for node in reversed(self.nodes):
            up = grads.get(id(node))
            if up is None or node.grad_fn is None:
                continue
            parent_grads = node.grad_fn(up)
            for parent, g in zip(node.parents, parent_grads):
                if g is None:
                    continue
                acc = grads.get(id(parent))
                grads[id(parent)] = g if acc is None else acc + g
        return grads


def backward(output: Tensor, leaves: Iterable[Tensor] | None = None) -> dict[int, np.ndarray]:
    """Gradients of a scalar output, keyed by id(tensor).

    With `leaves` given, the result holds exactly those tensors' gradients
    (zeros when a leaf never reached the output). Otherwise it holds every
    trainable leaf found on the tape.
    """
    tape = GradTape(output)
    grads = tape.gradients()
    if leaves is None:
        return {id(n): grads[id(n)] for n in tape.nodes
                if n.trainable and not n.parents and id(n) in grads}
    return {id(t): grads.get(id(t), np.zeros(t.shape)) for t in leaves}


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-6) -> float:
    """Worst relative error between analytic and central-difference gradients.

    Relative error uses denominator max(|analytic|, |numeric|, 1e-8) per
    element. `f` must map a tensor to a scalar tensor and be smooth in an
    h-neighborhood of x.
    """
    if h <= 0.0:
        raise ValueError(f"step h must be positive, got {h}")
    x0 = Tensor(x.data if isinstance(x, Tensor) else x, trainable=True)
    out = f(x0)
    if not isinstance(out, Tensor) or out.size != 1:
        raise ShapeError("grad_check needs f to return a scalar tensor")
    analytic = backward(out, leaves=[x0])[id(x0)]

    flat = x0.data.reshape(-1)
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        bumped = flat.copy()
        bumped[i] = flat[i] + h
        f_plus = f(Tensor(bumped.reshape(x0.shape))).item()
        bumped[i] = flat[i] - h
        f_minus = f(Tensor(bumped.reshape(x0.shape))).item()
        numeric[i] = (f_plus - f_minus) / (2.0 * h)
    numeric = numeric.reshape(x0.shape)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))


def fan_in_uniform(rng: np.random.Generator, rows: int, cols: int,
                   trainable: bool = True, name: str | None = None) -> Tensor:
    """Seeded uniform(-1/sqrt(rows), +1/sqrt(rows)) init for a (rows, cols) map."""
    bound = 1.0 / np.sqrt(rows)
    return Tensor(rng.uniform(-bound, bound, size=(rows, cols)),
                  trainable=trainable, name=name)
