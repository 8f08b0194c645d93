"""Tape-based reverse-mode differentiation over dense float64 arrays.

A scalar-valued program is recorded once, eagerly, while it runs on
``Var`` handles; the resulting :class:`Tape` caches every intermediate
value.  ``backward`` then sweeps the tape in fixed reverse order, so for
identical inputs the gradients are deterministic down to the bit.

Supported primitives: add/sub/neg, scale by a constant, elementwise
multiply, dot, matrix products, transpose, exp/log/sin/cos/tanh/logcosh,
|x|^p and sign(x)|x|^p, log-sum-exp (max-shifted), sum, max, column
slicing and horizontal stacking.  Values are scalars, vectors, or
matrices; broadcasting follows numpy but is limited to ndim <= 2.

All arithmetic is float64.  |x|^p and sign(x)|x|^p use the subgradient
value 0 at x = 0 (a valid almost-everywhere selection; keeps adjoints
finite at kinks).
"""

from __future__ import annotations

import builtins
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np


class DiffEngineError(Exception):
    """Base class for recording and differentiation failures."""


class UnsupportedPrimitiveError(DiffEngineError):
    """A program tried to use an operation the engine does not record."""


class ShapeMismatchError(DiffEngineError):
    """Operand shapes are incompatible for the requested primitive."""


class UnknownInputError(DiffEngineError):
    """A gradient was requested for an input id the tape does not hold."""


class NonFiniteEvaluationError(DiffEngineError):
    """A numeric probe produced a non-finite value."""


def _as_value(x, *, what: str = "operand") -> np.ndarray:
    v = np.asarray(x, dtype=np.float64)
    if v.ndim > 2:
        raise ShapeMismatchError(f"{what} has ndim={v.ndim}; only scalars, vectors and matrices are supported")
    return v


# ---------------------------------------------------------------------------
# forward / vjp rules
# ---------------------------------------------------------------------------

def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcasted gradient back to the parent's shape."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(op: str, a: np.ndarray, b: np.ndarray) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatchError(f"{op}: operands with shapes {a.shape} and {b.shape} do not broadcast") from None


def _abspow_grad(x: np.ndarray, p: float) -> np.ndarray:
    # d/dx |x|^p = p sign(x) |x|^(p-1); 0 at the kink by convention.
    with np.errstate(divide="ignore", invalid="ignore"):
        g = p * np.sign(x) * np.abs(x) ** (p - 1.0)
    return np.where(x == 0.0, 0.0, g)


def _sgnpow_grad(x: np.ndarray, p: float) -> np.ndarray:
    # d/dx sign(x)|x|^p = p |x|^(p-1); 0 at the kink by convention.
    with np.errstate(divide="ignore", invalid="ignore"):
        g = p * np.abs(x) ** (p - 1.0)
    return np.where(x == 0.0, 0.0, g)


def _logsumexp_forward(x: np.ndarray, axis) -> np.ndarray:
    # max-shifted for overflow safety
    m = np.max(x, axis=axis, keepdims=axis is not None)
    shifted = np.exp(x - m)
    s = np.sum(shifted, axis=axis, keepdims=axis is not None)
    out = m + np.log(s)
    return out if axis is not None else np.asarray(out)


def _forward(op: str, vals: list[np.ndarray], meta: tuple) -> np.ndarray:
    if op == "add":
        _broadcast_shape(op, vals[0], vals[1])
        return vals[0] + vals[1]
    if op == "sub":
        _broadcast_shape(op, vals[0], vals[1])
        return vals[0] - vals[1]
    if op == "mul":
        _broadcast_shape(op, vals[0], vals[1])
        return vals[0] * vals[1]
    if op == "neg":
        return -vals[0]
    if op == "scale":
        return vals[0] * meta[0]
    if op == "dot":
        a, b = vals
        if a.shape != b.shape:
            raise ShapeMismatchError(f"dot: operands with shapes {a.shape} and {b.shape} must match")
        return np.asarray(np.sum(a * b))
    if op == "matmul":
        a, b = vals
        if a.ndim == 0 or b.ndim == 0:
            raise ShapeMismatchError("matmul: operands must be vectors or matrices")
        if a.shape[-1] != b.shape[0]:
            raise ShapeMismatchError(f"matmul: inner dimensions of {a.shape} and {b.shape} disagree")
        return a @ b
    if op == "transpose":
        if vals[0].ndim != 2:
            raise ShapeMismatchError(f"transpose: expected a matrix, got shape {vals[0].shape}")
        return vals[0].T.copy()
    if op == "exp":
        with np.errstate(over="ignore"):
            return np.exp(vals[0])
    if op == "log":
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.log(vals[0])
    if op == "sin":
        return np.sin(vals[0])
    if op == "cos":
        return np.cos(vals[0])
    if op == "tanh":
        return np.tanh(vals[0])
    if op == "logcosh":
        x = vals[0]
        ax = np.abs(x)
        return ax + np.log1p(np.exp(-2.0 * ax)) - np.log(2.0)
    if op == "abspow":
        return np.abs(vals[0]) ** meta[0]
    if op == "sgnpow":
        return np.sign(vals[0]) * np.abs(vals[0]) ** meta[0]
    if op == "logsumexp":
        return _logsumexp_forward(vals[0], meta[0])
    if op == "sum":
        axis = meta[0]
        return np.asarray(np.sum(vals[0], axis=axis, keepdims=axis is not None))
    if op == "max":
        return np.asarray(np.max(vals[0]))
    if op == "cols":
        j0, j1 = meta
        v = vals[0]
        if v.ndim != 2:
            raise ShapeMismatchError(f"cols: expected a matrix, got shape {v.shape}")
        return v[:, j0:j1].copy()
    if op == "hstack":
        for v in vals:
            if v.ndim != 2:
                raise ShapeMismatchError(f"hstack: expected matrices, got shape {v.shape}")
        return np.concatenate(vals, axis=1)
    raise UnsupportedPrimitiveError(f"unsupported primitive: {op}")


def _vjp(op: str, g: np.ndarray, out: np.ndarray, vals: list[np.ndarray], meta: tuple) -> tuple:
    if op == "add":
        return (_unbroadcast(g, vals[0].shape), _unbroadcast(g, vals[1].shape))
    if op == "sub":
        return (_unbroadcast(g, vals[0].shape), _unbroadcast(-g, vals[1].shape))
    if op == "mul":
        return (_unbroadcast(g * vals[1], vals[0].shape), _unbroadcast(g * vals[0], vals[1].shape))
    if op == "neg":
        return (-g,)
    if op == "scale":
        return (g * meta[0],)
    if op == "dot":
        return (g * vals[1], g * vals[0])
    if op == "matmul":
        a, b = vals
        if a.ndim == 2 and b.ndim == 2:
            return (g @ b.T, a.T @ g)
        if a.ndim == 2 and b.ndim == 1:
            return (np.outer(g, b), a.T @ g)
        # a.ndim == 1, b.ndim == 2
        return (b @ g, np.outer(a, g))
    if op == "transpose":
        return (g.T.copy(),)
    if op == "exp":
        return (g * out,)
    if op == "log":
        return (g / vals[0],)
    if op == "sin":
        return (g * np.cos(vals[0]),)
    if op == "cos":
        return (-g * np.sin(vals[0]),)
    if op == "tanh":
        return (g * (1.0 - out * out),)
    if op == "logcosh":
        return (g * np.tanh(vals[0]),)
    if op == "abspow":
        return (g * _abspow_grad(vals[0], meta[0]),)
    if op == "sgnpow":
        return (g * _sgnpow_grad(vals[0], meta[0]),)
    if op == "logsumexp":
        axis = meta[0]
        soft = np.exp(vals[0] - (out if axis is not None else out))
        return (g * soft,)
    if op == "sum":
        axis = meta[0]
        if axis is None:
            return (np.broadcast_to(g, vals[0].shape).copy(),)
        return (np.broadcast_to(g, vals[0].shape).copy(),)
    if op == "max":
        mask = np.zeros_like(vals[0])
        idx = np.unravel_index(int(np.argmax(vals[0])), vals[0].shape)
        mask[idx] = 1.0
        return (g * mask,)
    if op == "cols":
        j0, j1 = meta
        full = np.zeros_like(vals[0])
        full[:, j0:j1] = g
        return (full,)
    if op == "hstack":
        grads = []
        j = 0
        for v in vals:
            grads.append(g[:, j:j + v.shape[1]].copy())
            j += v.shape[1]
        return tuple(grads)
    raise UnsupportedPrimitiveError(f"unsupported primitive: {op}")


# ---------------------------------------------------------------------------
# tape
# ---------------------------------------------------------------------------

@dataclass
class Node:
    op: str
    args: tuple
    meta: tuple
    value: np.ndarray


class Tape:
    """Topologically ordered record of one scalar computation.

    Single-use and single-threaded; distinct tapes are independent.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.inputs: dict[str, int] = {}
        self.output_id: int | None = None
        self._frozen = False

    def _push(self, op: str, args: tuple, meta: tuple, value: np.ndarray) -> int:
        if self._frozen:
            raise DiffEngineError("tape is frozen; record a new tape instead of extending this one")
        self.nodes.append(Node(op, args, meta, value))
        return len(self.nodes) - 1

    def _add_input(self, name: str, value) -> "Var":
        if name in self.inputs:
            raise DiffEngineError(f"duplicate input id {name!r}")
        v = _as_value(value, what=f"input {name!r}")
        idx = self._push("input", (), (name,), v)
        self.inputs[name] = idx
        return Var(self, idx)

    @property
    def value(self) -> float:
        if self.output_id is None:
            raise DiffEngineError("tape has no recorded output")
        return float(self.nodes[self.output_id].value)

    def replay(self, inputs: Mapping[str, np.ndarray]) -> float:
        """Re-run the recorded computation on fresh input values.

        For identical inputs the result is bit-for-bit the recorded value.
        """
        missing = set(self.inputs) - set(inputs)
        if missing:
            raise UnknownInputError(f"replay is missing inputs: {sorted(missing)}")
        values: list[np.ndarray] = []
        for node in self.nodes:
            if node.op == "input":
                v = _as_value(inputs[node.meta[0]], what=f"input {node.meta[0]!r}")
                if v.shape != node.value.shape:
                    raise ShapeMismatchError(
                        f"replay input {node.meta[0]!r} has shape {v.shape}, recorded {node.value.shape}")
                values.append(v)
            elif node.op == "const":
                values.append(node.value)
            else:
                values.append(_forward(node.op, [values[j] for j in node.args], node.meta))
        return float(values[self.output_id])


@dataclass
class GradientResult:
    value: float
    gradients: dict[str, np.ndarray]


class Var:
    """Handle to one tape node; arithmetic on it extends the tape."""

    __slots__ = ("tape", "idx")

    def __init__(self, tape: Tape, idx: int):
        self.tape = tape
        self.idx = idx

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.idx].value

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def _lift(self, other) -> "Var":
        if isinstance(other, Var):
            if other.tape is not self.tape:
                raise DiffEngineError("operands were recorded on different tapes")
            return other
        return constant(self.tape, other)

    def __add__(self, other):
        return _apply(self.tape, "add", (self, self._lift(other)))

    def __radd__(self, other):
        return _apply(self.tape, "add", (self._lift(other), self))

    def __sub__(self, other):
        return _apply(self.tape, "sub", (self, self._lift(other)))

    def __rsub__(self, other):
        return _apply(self.tape, "sub", (self._lift(other), self))

    def __neg__(self):
        return _apply(self.tape, "neg", (self,))

    def __mul__(self, other):
        if isinstance(other, (int, float)) or (isinstance(other, np.ndarray) and other.ndim == 0):
            return _apply(self.tape, "scale", (self,), (float(other),))
        return _apply(self.tape, "mul", (self, self._lift(other)))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return _apply(self.tape, "scale", (self,), (1.0 / float(other),))
        raise UnsupportedPrimitiveError("unsupported primitive: divide (by a non-constant)")

    def __pow__(self, other):
        raise UnsupportedPrimitiveError("unsupported primitive: pow (use abspow/sgnpow or mul)")

    def __matmul__(self, other):
        return _apply(self.tape, "matmul", (self, self._lift(other)))

    def __rmatmul__(self, other):
        return _apply(self.tape, "matmul", (self._lift(other), self))

    @property
    def T(self) -> "Var":
        return _apply(self.tape, "transpose", (self,))


def _apply(tape: Tape, op: str, parents: tuple, meta: tuple = ()) -> Var:
    vals = [p.value for p in parents]
    value = _forward(op, vals, meta)
    idx = tape._push(op, tuple(p.idx for p in parents), meta, value)
    return Var(tape, idx)


def constant(tape: Tape, value) -> Var:
    v = _as_value(value, what="constant")
    return Var(tape, tape._push("const", (), (), v))


# -- primitive wrappers ------------------------------------------------------

def exp(x: Var) -> Var:
    return _apply(x.tape, "exp", (x,))


def log(x: Var) -> Var:
    return _apply(x.tape, "log", (x,))


def sin(x: Var) -> Var:
    return _apply(x.tape, "sin", (x,))


def cos(x: Var) -> Var:
    return _apply(x.tape, "cos", (x,))


def tanh(x: Var) -> Var:
    return _apply(x.tape, "tanh", (x,))


def logcosh(x: Var) -> Var:
    return _apply(x.tape, "logcosh", (x,))


def abspow(x: Var, p: float) -> Var:
    """Elementwise |x|^p, p > 0.  Gradient takes the value 0 at x = 0."""
    if not p > 0:
        raise DiffEngineError(f"abspow exponent must be positive, got {p}")
    return _apply(x.tape, "abspow", (x,), (float(p),))


def sgnpow(x: Var, p: float) -> Var:
    """Elementwise sign(x)|x|^p, p > 0.  Gradient takes the value 0 at x = 0."""
    if not p > 0:
        raise DiffEngineError(f"sgnpow exponent must be positive, got {p}")
    return _apply(x.tape, "sgnpow", (x,), (float(p),))


def logsumexp(x: Var, axis: int | None = None) -> Var:
    if axis is not None and axis not in (0, 1):
        raise ShapeMismatchError(f"logsumexp: axis must be None, 0 or 1, got {axis}")
    return _apply(x.tape, "logsumexp", (x,), (axis,))


def sum(x: Var, axis: int | None = None) -> Var:  # noqa: A001 - mirrors the primitive name
    if axis is not None and axis not in (0, 1):
        raise ShapeMismatchError(f"sum: axis must be None, 0 or 1, got {axis}")
    return _apply(x.tape, "sum", (x,), (axis,))


def max(x: Var) -> Var:  # noqa: A001 - mirrors the primitive name
    """Maximum entry; the gradient selects the first argmax in C order."""
    return _apply(x.tape, "max", (x,))


def mul(a: Var, b: Var) -> Var:
    """Elementwise product (numpy broadcasting up to ndim 2)."""
    return _apply(a.tape, "mul", (a, a._lift(b)))


def dot(a: Var, b: Var) -> Var:
    return _apply(a.tape, "dot", (a, a._lift(b)))


def matmul(a: Var, b: Var) -> Var:
    return _apply(a.tape, "matmul", (a, a._lift(b)))


def cols(x: Var, j0: int, j1: int) -> Var:
    """Column slice x[:, j0:j1] of a matrix node."""
    return _apply(x.tape, "cols", (x,), (int(j0), int(j1)))


def hstack(parts: Sequence[Var]) -> Var:
    parts = tuple(parts)
    if not parts:
        raise DiffEngineError("hstack needs at least one operand")
    tape = parts[0].tape
    return _apply(tape, "hstack", tuple(parts[0]._lift(p) for p in parts))


# ---------------------------------------------------------------------------
# public entry points
# ---------------------------------------------------------------------------

Program = Callable[[Mapping[str, Var]], Var]


def record_scalar(program: Program, inputs: Mapping[str, np.ndarray]) -> Tape:
    """Run ``program`` on traced handles for ``inputs`` and freeze the tape.

    ``program`` receives a mapping name -> Var and must return a scalar
    Var built from supported primitives only.
    """
    tape = Tape()
    handles = {name: tape._add_input(name, value) for name, value in inputs.items()}
    out = program(handles)
    if not isinstance(out, Var) or out.tape is not tape:
        raise DiffEngineError("program must return a Var recorded on the provided tape")
    if out.shape != ():
        raise ShapeMismatchError(f"program output must be a scalar, got shape {out.shape}")
    tape.output_id = out.idx
    tape._frozen = True
    return tape


def backward(tape: Tape, requested: Sequence[str]) -> GradientResult:
    """Exact reverse-mode gradients of the recorded scalar.

    Adjoints are accumulated in the reverse of tape order, which fixes the
    floating-point result: two calls on the same tape are bit-identical.
    """
    if tape.output_id is None:
        raise DiffEngineError("tape has no recorded output")
    for name in requested:
        if name not in tape.inputs:
            raise UnknownInputError(f"unknown input id {name!r}; tape holds {sorted(tape.inputs)}")
    nodes = tape.nodes
    adjoint: list[np.ndarray | None] = [None] * len(nodes)
    adjoint[tape.output_id] = np.asarray(1.0)
    for i in range(len(nodes) - 1, -1, -1):
        g = adjoint[i]
        if g is None:
            continue
        node = nodes[i]
        if node.op in ("input", "const"):
            continue
        parent_vals = [nodes[j].value for j in node.args]
        grads = _vjp(node.op, g, node.value, parent_vals, node.meta)
        for j, pg in zip(node.args, grads):
            if pg is None:
                continue
            adjoint[j] = pg if adjoint[j] is None else adjoint[j] + pg
    gradients = {}
    for name in requested:
        idx = tape.inputs[name]
        g = adjoint[idx]
        gradients[name] = np.zeros_like(nodes[idx].value) if g is None else np.asarray(g)
    return GradientResult(value=tape.value, gradients=gradients)


def finite_difference_oracle(program: Program, inputs: Mapping[str, np.ndarray],
                             step: float) -> dict[str, np.ndarray]:
    """Central-difference gradient (f(x+h e_i) - f(x-h e_i)) / 2h per coordinate.

    Independent of ``backward``; used to cross-check it.
    """
    if not step > 0:
        raise DiffEngineError(f"step must be positive, got {step}")
    base = {name: _as_value(v, what=f"input {name!r}").copy() for name, v in inputs.items()}

    def evaluate(vals: Mapping[str, np.ndarray]) -> float:
        return record_scalar(program, vals).value

    grads: dict[str, np.ndarray] = {}
    for name, arr in base.items():
        g = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            hi = {k: (v.copy() if k == name else v) for k, v in base.items()}
            lo = {k: (v.copy() if k == name else v) for k, v in base.items()}
            hi[name][idx] += step
            lo[name][idx] -= step
            f_hi = evaluate(hi)
            f_lo = evaluate(lo)
            if not (np.isfinite(f_hi) and np.isfinite(f_lo)):
                raise NonFiniteEvaluationError(f"non-finite evaluation while probing {name}[{idx}]")
            g[idx] = (f_hi - f_lo) / (2.0 * step)
        grads[name] = g
    return grads
