"""Reverse-mode automatic differentiation over dense float64 arrays.

A deliberately small engine: a fixed primitive set (matmul, add, mul,
leaky_relu, tanh, concat, max_reduce, mean, sum, square, exp, log), an
explicit execution tape, and a central-difference gradient checker.
Broadcasting is limited to the point axis (axis 0) in `add` and to
scalars; everything else must match shapes exactly.

Gradients accumulate with += into every `requires_grad` leaf; call
`zero_grad` between independent backward passes. Running a second
backward without zeroing sums the gradients (by design, so one tape can
serve an accumulated batch loss).
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

LEAKY_SLOPE = 0.1


class ShapeMismatch(ValueError):
    """Operands cannot be combined under the declared primitive."""


class Tensor:
    """Dense float64 array with an optional same-shape gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad else None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {tuple(self.data.shape)}")
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={tuple(self.data.shape)}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class _Record:
    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(self, op, inputs, output, backward):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward


_TLS = threading.local()


def _tape_stack() -> list:
    stack = getattr(_TLS, "stack", None)
    if stack is None:
        stack = []
        _TLS.stack = stack
    return stack


class Tape:
    """Ordered record of primitive applications for one forward pass.

    Records are appended in execution order, which is a topological
    order by construction; backward replays them exactly once in
    reverse. One tape is single-threaded; independent tapes may run in
    parallel threads as long as they share no tensors.
    """

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tape_stack().pop()
        assert popped is self
        return False

    def backward(self, output: Tensor) -> None:
        """Accumulate d(output)/d(leaf) into every requires_grad leaf."""
        if output.data.size != 1:
            raise ValueError(
                f"backward needs a scalar output, got shape {tuple(output.shape)}"
            )
        produced = {id(rec.output) for rec in self.records}
        if id(output) not in produced:
            raise ValueError("output was not produced on this tape")
        # Intermediates restart from zero on every pass; leaves keep
        # accumulating until zero_grad.
        for rec in self.records:
            rec.output.grad[...] = 0.0
        output.grad[...] = 1.0
        for rec in reversed(self.records):
            rec.backward(rec.output.grad)


def _coerce(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _emit(op: str, inputs: tuple, value: np.ndarray, backward) -> Tensor:
    out = Tensor(value, requires_grad=any(t.requires_grad for t in inputs))
    if out.requires_grad:
        stack = _tape_stack()
        if stack:
            stack[-1].records.append(_Record(op, inputs, out, backward))
    return out


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Undo the broadcast of an operand of `shape` inside gradient g."""
    if g.shape == shape:
        return g
    if len(shape) == 0 or (len(shape) == 1 and shape[0] == 1 and g.size != 1):
        return np.sum(g).reshape(shape)
    # point-axis broadcast: operand was tiled along axis 0
    return g.sum(axis=0)


def matmul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    if a.data.ndim not in (1, 2) or b.data.ndim not in (1, 2):
        raise ShapeMismatch(f"matmul: operands must be 1-D or 2-D, got {a.shape} and {b.shape}")
    if a.data.shape[-1] != b.data.shape[0]:
        raise ShapeMismatch(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    value = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            if a.data.ndim == 2 and b.data.ndim == 2:
                a.grad += g @ b.data.T
            elif a.data.ndim == 1 and b.data.ndim == 2:
                a.grad += b.data @ g
            elif a.data.ndim == 2 and b.data.ndim == 1:
                a.grad += np.multiply.outer(g, b.data)
            else:
                a.grad += g * b.data
        if b.requires_grad:
            if b.data.ndim == 2 and a.data.ndim == 2:
                b.grad += a.data.T @ g
            elif b.data.ndim == 2 and a.data.ndim == 1:
                b.grad += np.multiply.outer(a.data, g)
            elif b.data.ndim == 1 and a.data.ndim == 2:
                b.grad += a.data.T @ g
            else:
                b.grad += g * a.data

    return _emit("matmul", (a, b), value, backward)


def add(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    sa, sb = a.data.shape, b.data.shape
    compatible = (
        sa == sb
        or a.data.size == 1
        or b.data.size == 1
        or (len(sa) == len(sb) + 1 and sa[1:] == sb)
        or (len(sb) == len(sa) + 1 and sb[1:] == sa)
    )
    if not compatible:
        raise ShapeMismatch(f"add: incompatible shapes {sa} and {sb}")
    value = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a.grad += _reduce_to(g, sa)
        if b.requires_grad:
            b.grad += _reduce_to(g, sb)

    return _emit("add", (a, b), value, backward)


def mul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    sa, sb = a.data.shape, b.data.shape
    if not (sa == sb or a.data.size == 1 or b.data.size == 1):
        raise ShapeMismatch(f"mul: incompatible shapes {sa} and {sb}")
    value = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a.grad += _reduce_to(g * b.data, sa)
        if b.requires_grad:
            b.grad += _reduce_to(g * a.data, sb)

    return _emit("mul", (a, b), value, backward)


def sub(a, b) -> Tensor:
    return add(a, mul(b, -1.0))


def leaky_relu(x) -> Tensor:
    x = _coerce(x)
    value = np.where(x.data > 0.0, x.data, LEAKY_SLOPE * x.data)

    def backward(g):
        if x.requires_grad:
            x.grad += g * np.where(x.data > 0.0, 1.0, LEAKY_SLOPE)

    return _emit("leaky_relu", (x,), value, backward)


def tanh(x) -> Tensor:
    x = _coerce(x)
    value = np.tanh(x.data)

    def backward(g):
        if x.requires_grad:
            x.grad += g * (1.0 - value * value)

    return _emit("tanh", (x,), value, backward)


def concat(parts: Sequence) -> Tensor:
    ts = [_coerce(p) for p in parts]
    if not ts:
        raise ShapeMismatch("concat: empty input list")
    ndim = ts[0].data.ndim
    lead = ts[0].data.shape[:-1]
    for t in ts[1:]:
        if t.data.ndim != ndim or t.data.shape[:-1] != lead:
            raise ShapeMismatch(
                f"concat: incompatible shapes {ts[0].shape} and {t.shape}"
            )
    value = np.concatenate([t.data for t in ts], axis=-1)

    def backward(g):
        start = 0
        for t in ts:
            width = t.data.shape[-1]
            if t.requires_grad:
                t.grad += g[..., start : start + width]
            start += width

    return _emit("concat", tuple(ts), value, backward)


def max_reduce(x) -> Tensor:
    """Columnwise max over the point axis of an (n, d) tensor."""
    x = _coerce(x)
    if x.data.ndim != 2:
        raise ShapeMismatch(f"max_reduce: needs a 2-D tensor, got {x.shape}")
    idx = np.argmax(x.data, axis=0)  # first index wins ties
    cols = np.arange(x.data.shape[1])
    value = x.data[idx, cols]

    def backward(g):
        if x.requires_grad:
            x.grad[idx, cols] += g

    return _emit("max_reduce", (x,), value, backward)


def mean(x) -> Tensor:
    x = _coerce(x)
    value = np.asarray(x.data.mean())

    def backward(g):
        if x.requires_grad:
            x.grad += g / x.data.size

    return _emit("mean", (x,), value, backward)


def total(x) -> Tensor:
    """Sum of all elements (scalar output)."""
    x = _coerce(x)
    value = np.asarray(x.data.sum())

    def backward(g):
        if x.requires_grad:
            x.grad += g

    return _emit("sum", (x,), value, backward)


def square(x) -> Tensor:
    x = _coerce(x)
    value = x.data * x.data

    def backward(g):
        if x.requires_grad:
            x.grad += g * (2.0 * x.data)

    return _emit("square", (x,), value, backward)


def exp(x) -> Tensor:
    x = _coerce(x)
    value = np.exp(x.data)

    def backward(g):
        if x.requires_grad:
            x.grad += g * value

    return _emit("exp", (x,), value, backward)


def log(x) -> Tensor:
    x = _coerce(x)
    value = np.log(x.data)

    def backward(g):
        if x.requires_grad:
            x.grad += g / x.data

    return _emit("log", (x,), value, backward)


def zero_grads(params) -> None:
    for p in params:
        p.zero_grad()


def finite_diff_check(
    program: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
) -> float:
    """Max relative error between tape gradients and central differences.

    `program` must rebuild the scalar output from the current values of
    `params` on every call and must be deterministic. Error per
    coordinate is |analytic - numeric| / max(1, |analytic|).
    """
    if not (0.0 < h <= 1e-2):
        raise ValueError(f"h must be in (0, 1e-2], got {h}")
    with Tape() as tape:
        out = program()
    if out.data.size != 1:
        raise ValueError("finite_diff_check needs a scalar program output")
    if not np.isfinite(out.data):
        raise FloatingPointError("non-finite program value at base point")
    zero_grads(params)
    tape.backward(out)
    analytic = [p.grad.copy() for p in params]

    worst = 0.0
    for pi, p in enumerate(params):
        flat = p.data.reshape(-1)
        grad_flat = analytic[pi].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = program().item()
            flat[i] = orig - h
            f_minus = program().item()
            flat[i] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise FloatingPointError(
                    f"non-finite evaluation at parameter {pi} coordinate {i}"
                )
            numeric = (f_plus - f_minus) / (2.0 * h)
            err = abs(grad_flat[i] - numeric) / max(1.0, abs(grad_flat[i]))
            if err > worst:
                worst = err
    return worst
