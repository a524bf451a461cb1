"""Minimal reverse-mode automatic differentiation over dense float64 matrices.

Every value is a 2-D array. A Tape records primitive operations in
topological order; a backward pass seeded at a scalar output accumulates
adjoints into every node reachable from it. Broadcasting is restricted to
scalar (1x1) against array so that every gradient rule stays auditable.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Operand shapes do not conform to the requested primitive."""


class Tape:
    """Ordered list of primitive records; operands always precede results."""

    def __init__(self):
        self.nodes = []
        # per-tape caches used by callers (network parameter leaves, ones columns)
        self.param_cache = {}
        self.ones_cache = {}

    def var(self, value) -> "Var":
        """Register a leaf (differentiation target) holding `value`."""
        v = Var(np.asarray(value, dtype=np.float64), self, op="leaf")
        self.nodes.append(v)
        return v

    def ones_column(self, rows: int) -> "Var":
        """Constant column of ones, cached per tape (used for bias rows)."""
        key = rows
        if key not in self.ones_cache:
            self.ones_cache[key] = constant(np.ones((rows, 1)))
        return self.ones_cache[key]

    def reset_grads(self):
        for node in self.nodes:
            node.grad = None


class Var:
    """A matrix on a tape (or a constant when tape is None)."""

    __slots__ = ("value", "tape", "grad", "op", "_parents", "_backward")

    def __init__(self, value, tape=None, op="const", parents=(), backward=None):
        value = np.asarray(value, dtype=np.float64)
        if value.ndim == 1:
            value = value.reshape(1, -1)
        elif value.ndim == 0:
            value = value.reshape(1, 1)
        if value.ndim != 2:
            raise ShapeError(f"values must be 2-D matrices, got shape {value.shape}")
        self.value = value
        self.tape = tape
        self.grad = None
        self.op = op
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(op={self.op!r}, shape={self.value.shape})"


def constant(value) -> Var:
    """A constant matrix; participates in ops but receives no adjoint."""
    return Var(value, tape=None, op="const")


def _as_var(x) -> Var:
    return x if isinstance(x, Var) else constant(x)


def _record(op, parents, value, backward) -> Var:
    tapes = {p.tape for p in parents if p.tape is not None}
    if len(tapes) > 1:
        raise ValueError(f"operands of {op} live on different tapes")
    tape = tapes.pop() if tapes else None
    out = Var(value, tape=tape, op=op, parents=parents, backward=backward)
    if tape is not None:
        tape.nodes.append(out)
    return out


def _accum(var, delta):
    if var.tape is None:
        return
    if var.grad is None:
        var.grad = np.zeros_like(var.value)
    var.grad += delta


def _is_scalar(v) -> bool:
    return v.value.shape == (1, 1)


def _reduce_to(shape, arr):
    # inverse of scalar-against-array broadcasting
    if shape == (1, 1) and arr.shape != (1, 1):
        return np.array([[arr.sum()]])
    return arr


def _check_elementwise(op, a, b):
    if a.value.shape != b.value.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise ShapeError(
            f"{op}: shapes {a.value.shape} and {b.value.shape} neither match "
            "nor broadcast scalar-against-array"
        )


def add(a, b) -> Var:
    a, b = _as_var(a), _as_var(b)
    _check_elementwise("add", a, b)

    def backward(out):
        _accum(a, _reduce_to(a.value.shape, out.grad))
        _accum(b, _reduce_to(b.value.shape, out.grad))

    return _record("add", (a, b), a.value + b.value, backward)


def sub(a, b) -> Var:
    a, b = _as_var(a), _as_var(b)
    _check_elementwise("sub", a, b)

    def backward(out):
        _accum(a, _reduce_to(a.value.shape, out.grad))
        _accum(b, _reduce_to(b.value.shape, -out.grad))

    return _record("sub", (a, b), a.value - b.value, backward)


def mul(a, b) -> Var:
    """Elementwise product (equal shapes or scalar against array)."""
    a, b = _as_var(a), _as_var(b)
    _check_elementwise("mul", a, b)

    def backward(out):
        _accum(a, _reduce_to(a.value.shape, out.grad * b.value))
        _accum(b, _reduce_to(b.value.shape, out.grad * a.value))

    return _record("mul", (a, b), a.value * b.value, backward)


def smul(a, s: float) -> Var:
    """Product with a python scalar (not a differentiation target)."""
    a = _as_var(a)
    s = float(s)

    def backward(out):
        _accum(a, s * out.grad)

    return _record("smul", (a,), s * a.value, backward)


def matmul(a, b) -> Var:
    a, b = _as_var(a), _as_var(b)
    if a.value.shape[1] != b.value.shape[0]:
        raise ShapeError(
            f"matmul: inner dimensions differ, {a.value.shape} x {b.value.shape}"
        )

    def backward(out):
        _accum(a, out.grad @ b.value.T)
        _accum(b, a.value.T @ out.grad)

    return _record("matmul", (a, b), a.value @ b.value, backward)


def sin(a) -> Var:
    a = _as_var(a)

    def backward(out):
        _accum(a, np.cos(a.value) * out.grad)

    return _record("sin", (a,), np.sin(a.value), backward)


def cos(a) -> Var:
    a = _as_var(a)

    def backward(out):
        _accum(a, -np.sin(a.value) * out.grad)

    return _record("cos", (a,), np.cos(a.value), backward)


def tanh(a) -> Var:
    a = _as_var(a)
    val = np.tanh(a.value)

    def backward(out):
        _accum(a, (1.0 - out.value * out.value) * out.grad)

    return _record("tanh", (a,), val, backward)


def exp(a) -> Var:
    a = _as_var(a)

    def backward(out):
        _accum(a, out.value * out.grad)

    return _record("exp", (a,), np.exp(a.value), backward)


def power(a, n: int) -> Var:
    """Integer power, elementwise; negative exponents allowed (nonzero base)."""
    a = _as_var(a)
    if not isinstance(n, (int, np.integer)):
        raise ShapeError(f"power: exponent must be an integer, got {n!r}")
    n = int(n)

    def backward(out):
        _accum(a, n * a.value ** (n - 1) * out.grad)

    return _record("power", (a,), a.value ** n, backward)


def vsum(a) -> Var:
    """Sum of all entries, as a 1x1 matrix."""
    a = _as_var(a)

    def backward(out):
        _accum(a, np.full_like(a.value, out.grad[0, 0]))

    return _record("sum", (a,), np.array([[a.value.sum()]]), backward)


def sum_rows(a) -> Var:
    """Column vector of row sums: (n, m) -> (n, 1)."""
    a = _as_var(a)

    def backward(out):
        _accum(a, np.broadcast_to(out.grad, a.value.shape).copy())

    return _record("sum_rows", (a,), a.value.sum(axis=1, keepdims=True), backward)


def sum_cols(a) -> Var:
    """Row vector of column sums: (n, m) -> (1, m)."""
    a = _as_var(a)

    def backward(out):
        _accum(a, np.broadcast_to(out.grad, a.value.shape).copy())

    return _record("sum_cols", (a,), a.value.sum(axis=0, keepdims=True), backward)


def concat(parts, axis: int = 0) -> Var:
    parts = [_as_var(p) for p in parts]
    if axis not in (0, 1):
        raise ShapeError(f"concat: axis must be 0 or 1, got {axis}")
    other = 1 - axis
    sizes = [p.value.shape[axis] for p in parts]
    widths = {p.value.shape[other] for p in parts}
    if len(widths) != 1:
        raise ShapeError(f"concat: mismatched shapes {[p.value.shape for p in parts]}")
    offsets = np.cumsum([0] + sizes)

    def backward(out):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            piece = out.grad[lo:hi, :] if axis == 0 else out.grad[:, lo:hi]
            _accum(p, piece)

    return _record(
        "concat", tuple(parts), np.concatenate([p.value for p in parts], axis=axis),
        backward,
    )


def slice_rows(a, start: int, count: int) -> Var:
    a = _as_var(a)
    if start < 0 or start + count > a.value.shape[0]:
        raise ShapeError(
            f"slice_rows: [{start}:{start + count}] out of bounds for {a.value.shape}"
        )

    def backward(out):
        if a.tape is None:
            return
        delta = np.zeros_like(a.value)
        delta[start:start + count, :] = out.grad
        _accum(a, delta)

    return _record("slice_rows", (a,), a.value[start:start + count, :].copy(), backward)


def slice_cols(a, start: int, count: int) -> Var:
    a = _as_var(a)
    if start < 0 or start + count > a.value.shape[1]:
        raise ShapeError(
            f"slice_cols: [{start}:{start + count}] out of bounds for {a.value.shape}"
        )

    def backward(out):
        if a.tape is None:
            return
        delta = np.zeros_like(a.value)
        delta[:, start:start + count] = out.grad
        _accum(a, delta)

    return _record("slice_cols", (a,), a.value[:, start:start + count].copy(), backward)


def _backward_from(var: Var, seed: np.ndarray):
    """Run one backward pass on var's tape seeded with `seed` at var."""
    tape = var.tape
    if tape is None:
        raise ValueError("cannot differentiate a constant (no tape)")
    var.grad = np.array(seed, dtype=np.float64).reshape(var.value.shape)
    # nodes are in topological order by construction; walk them backward
    for node in reversed(tape.nodes):
        if node.grad is None or node._backward is None:
            continue
        node._backward(node)


def grad_wrt(output: Var, targets) -> list:
    """Gradients of a scalar output w.r.t. each target; adjoints reset after.

    Returns arrays shaped like the targets. Raises on non-scalar outputs and
    on targets living off the output's tape.
    """
    if output.value.shape != (1, 1):
        raise ShapeError(f"grad_wrt: output must be 1x1, got {output.value.shape}")
    targets = list(targets)
    for t in targets:
        if t.tape is not output.tape:
            raise ValueError("grad_wrt: target is not on the output's tape")
    _backward_from(output, np.ones((1, 1)))
    grads = [
        t.grad.copy() if t.grad is not None else np.zeros_like(t.value)
        for t in targets
    ]
    output.tape.reset_grads()
    return grads


def jacobian_wrt_input(outputs: Var, inp: Var) -> np.ndarray:
    """m x d Jacobian of a length-m output w.r.t. a length-d input.

    Implemented as m backward passes (one per output component); used as the
    diagnostic route, not in the training loop.
    """
    if 1 not in outputs.value.shape:
        raise ShapeError(f"jacobian_wrt_input: output must be a vector, got {outputs.value.shape}")
    if 1 not in inp.value.shape:
        raise ShapeError(f"jacobian_wrt_input: input must be a vector, got {inp.value.shape}")
    if inp.tape is not outputs.tape:
        raise ValueError("jacobian_wrt_input: input is not on the output's tape")
    m = outputs.value.size
    d = inp.value.size
    jac = np.zeros((m, d))
    for i in range(m):
        seed = np.zeros(m)
        seed[i] = 1.0
        _backward_from(outputs, seed.reshape(outputs.value.shape))
        if inp.grad is not None:
            jac[i, :] = inp.grad.reshape(-1)
        outputs.tape.reset_grads()
    return jac
