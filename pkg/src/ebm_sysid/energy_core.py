"""Convex layer primitives, the hybrid multilayer model, and its energy.

Each layer carries a proper convex C1 function F whose gradient is the
layer activation.  The visible layer is quadratic (identity activation),
hidden layers are static feedforward maps, and the scalar energy of the
assembled state drives the visible dynamics.

Every operation accepts a single state ``(N,)`` or a batch of row states
``(B, N)`` and matches the input's layout.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import optimize

from . import diffengine as de


class EnergyModelError(Exception):
    """Invalid model construction or evaluation."""


class ConjugateRadiusError(EnergyModelError):
    """Numeric conjugate maximizer hit the search boundary."""


def _rows(x) -> tuple[np.ndarray, bool]:
    v = np.asarray(x, dtype=np.float64)
    if v.ndim == 1:
        return v[None, :], True
    if v.ndim == 2:
        return v, False
    raise EnergyModelError(f"expected a vector or a batch of row vectors, got shape {v.shape}")


def _check_finite(x: np.ndarray, what: str):
    if not np.isfinite(x).all():
        raise EnergyModelError(f"non-finite input to {what}")


# ---------------------------------------------------------------------------
# convex primitives
# ---------------------------------------------------------------------------

_KINDS = ("quadratic", "logsumexp", "powernorm", "logcosh")


@dataclass(frozen=True)
class ConvexPrimitive:
    """A convex C1 function F with activation grad F and growth exponent.

    kind:
      quadratic    F(x) = ||x||^2 / 2,        activation x,                growth 2
      logsumexp    F(x) = log sum exp(bx) / b, activation softmax(bx),      growth 1
      powernorm    F(x) = sum |x_i|^q / q,     activation sign(x)|x|^(q-1), growth q
      logcosh      F(x) = sum log cosh(x_i),   activation tanh(x),          growth 1
    """

    kind: str
    beta: float = 1.0
    q: float = 2.0

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise EnergyModelError(f"unknown primitive kind {self.kind!r}; expected one of {_KINDS}")
        if self.kind == "logsumexp" and not self.beta > 0:
            raise EnergyModelError(f"logsumexp temperature must be positive, got {self.beta}")
        if self.kind == "powernorm" and not self.q > 1:
            raise EnergyModelError(f"powernorm exponent must exceed 1, got {self.q}")

    @property
    def growth_exponent(self) -> float:
        if self.kind == "quadratic":
            return 2.0
        if self.kind == "powernorm":
            return self.q
        return 1.0

    @property
    def bounded_activation(self) -> bool:
        """True if the activation image is a bounded set (any input magnitude)."""
        return self.kind in ("logsumexp", "logcosh")

    # -- numpy paths --------------------------------------------------------

    def value(self, x) -> np.ndarray | float:
        """F(x); for a batch, one value per row."""
        X, single = _rows(x)
        _check_finite(X, f"{self.kind} value")
        if self.kind == "quadratic":
            out = 0.5 * np.sum(X * X, axis=1)
        elif self.kind == "logsumexp":
            z = self.beta * X
            m = z.max(axis=1, keepdims=True)
            out = (m[:, 0] + np.log(np.sum(np.exp(z - m), axis=1))) / self.beta
        elif self.kind == "powernorm":
            out = np.sum(np.abs(X) ** self.q, axis=1) / self.q
        else:
            ax = np.abs(X)
            out = np.sum(ax + np.log1p(np.exp(-2.0 * ax)) - np.log(2.0), axis=1)
        return float(out[0]) if single else out

    def activation(self, x) -> np.ndarray:
        """grad F(x): softmax for logsumexp, sign(x)|x|^(q-1) for powernorm,
        tanh for logcosh, identity for quadratic."""
        X, single = _rows(x)
        _check_finite(X, f"{self.kind} activation")
        if self.kind == "quadratic":
            out = X.copy()
        elif self.kind == "logsumexp":
            z = self.beta * X
            z = z - z.max(axis=1, keepdims=True)
            e = np.exp(z)
            out = e / e.sum(axis=1, keepdims=True)
        elif self.kind == "powernorm":
            out = np.sign(X) * np.abs(X) ** (self.q - 1.0)
        else:
            out = np.tanh(X)
        return out[0] if single else out

    def jacobian_apply(self, x, v) -> np.ndarray:
        """(D activation)(x) @ v, rowwise.  At |.|^p kinks the diagonal
        entry takes the value 0, matching the engine's convention."""
        X, single = _rows(x)
        V, _ = _rows(v)
        if self.kind == "quadratic":
            out = V.copy()
        elif self.kind == "logsumexp":
            P = self.activation(X)
            pv = np.sum(P * V, axis=1, keepdims=True)
            out = self.beta * (P * V - P * pv)
        elif self.kind == "powernorm":
            with np.errstate(divide="ignore", invalid="ignore"):
                d = (self.q - 1.0) * np.abs(X) ** (self.q - 2.0)
            d = np.where(X == 0.0, 0.0, d)
            out = d * V
        else:
            t = np.tanh(X)
            out = (1.0 - t * t) * V
        return out[0] if single else out

    # -- graph builders ------------------------------------------------------

    def value_rows_graph(self, X: de.Var) -> de.Var:
        """Per-row F values as a (B, 1) node."""
        if self.kind == "quadratic":
            return de.sum(de.mul(X, X), axis=1) * 0.5
        if self.kind == "logsumexp":
            return de.logsumexp(X * self.beta, axis=1) * (1.0 / self.beta)
        if self.kind == "powernorm":
            return de.sum(de.abspow(X, self.q), axis=1) * (1.0 / self.q)
        return de.sum(de.logcosh(X), axis=1)

    def activation_graph(self, X: de.Var) -> de.Var:
        if self.kind == "quadratic":
            return X
        if self.kind == "logsumexp":
            z = X * self.beta
            return de.exp(z - de.logsumexp(z, axis=1))
        if self.kind == "powernorm":
            return de.sgnpow(X, self.q - 1.0)
        return de.tanh(X)

    def jacobian_apply_graph(self, X: de.Var, act: de.Var, V: de.Var) -> de.Var:
        """Graph form of jacobian_apply; ``act`` is the already-built
        activation node for ``X`` (reused to keep tapes small)."""
        if self.kind == "quadratic":
            return V
        if self.kind == "logsumexp":
            pv = de.sum(de.mul(act, V), axis=1)
            return (de.mul(act, V) - de.mul(act, pv)) * self.beta
        if self.kind == "powernorm":
            if self.q < 2.0:
                raise EnergyModelError(
                    "graph Jacobian for powernorm with q < 2 is unbounded at kinks; "
                    "use the numpy path")
            return de.mul(de.abspow(X, self.q - 2.0), V) * (self.q - 1.0)
        return de.mul(1.0 - de.mul(act, act), V)


def quadratic() -> ConvexPrimitive:
    return ConvexPrimitive("quadratic")


def log_sum_exp(beta: float = 1.0) -> ConvexPrimitive:
    return ConvexPrimitive("logsumexp", beta=beta)


def power_norm(q: float) -> ConvexPrimitive:
    return ConvexPrimitive("powernorm", q=q)


def log_cosh() -> ConvexPrimitive:
    return ConvexPrimitive("logcosh")


def activation(p: ConvexPrimitive, x) -> np.ndarray:
    return p.activation(x)


def primitive_value(p: ConvexPrimitive, x) -> np.ndarray | float:
    return p.value(x)


# ---------------------------------------------------------------------------
# layered model
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LayerSpec:
    width: int
    primitive: ConvexPrimitive

    def __post_init__(self):
        if self.width < 1:
            raise EnergyModelError(f"layer width must be >= 1, got {self.width}")
        if self.width == 1 and self.primitive.kind == "logsumexp":
            warnings.warn("width-1 logsumexp layer has constant activation 1 (zero Jacobian)",
                          stacklevel=3)


class HybridEBM:
    """Layered model: dynamical visible layer plus static hidden maps.

    ``weights[h]`` couples layer h to layer h+1 with shape (N_h, N_{h+1});
    the implied full interaction matrix is symmetric block-tridiagonal, so
    the reverse coupling is the stored block's transpose.  ``biases[h]``
    shifts layer h (visible bias included; all default zero).

    With ``require_invariance_conditions`` (default) the constructor
    enforces a quadratic visible layer and a bounded-activation first
    hidden layer, the architectural conditions under which the absorbing
    radius certificate applies.
    """

    def __init__(self, layers: Sequence[LayerSpec], weights: Sequence[np.ndarray],
                 biases: Sequence[np.ndarray] | None = None, *,
                 require_invariance_conditions: bool = True):
        self.layers = tuple(layers)
        if not self.layers:
            raise EnergyModelError("model needs at least one layer")
        self.weights = tuple(np.asarray(w, dtype=np.float64) for w in weights)
        if len(self.weights) != len(self.layers) - 1:
            raise EnergyModelError(
                f"expected {len(self.layers) - 1} coupling blocks, got {len(self.weights)}")
        for h, w in enumerate(self.weights):
            want = (self.layers[h].width, self.layers[h + 1].width)
            if w.shape != want:
                raise EnergyModelError(f"coupling block {h} has shape {w.shape}, expected {want}")
        if biases is None:
            biases = [np.zeros(spec.width) for spec in self.layers]
        self.biases = tuple(np.asarray(b, dtype=np.float64) for b in biases)
        if len(self.biases) != len(self.layers):
            raise EnergyModelError(f"expected {len(self.layers)} biases, got {len(self.biases)}")
        for h, b in enumerate(self.biases):
            if b.shape != (self.layers[h].width,):
                raise EnergyModelError(
                    f"bias {h} has shape {b.shape}, expected ({self.layers[h].width},)")
        if require_invariance_conditions:
            violation = self.invariance_condition_violation()
            if violation:
                raise EnergyModelError(violation)

    def invariance_condition_violation(self) -> str | None:
        """Name the first violated architectural condition, or None."""
        if self.layers[0].primitive.kind != "quadratic":
            return ("condition (i) violated: visible layer must be quadratic "
                    f"(identity activation), got {self.layers[0].primitive.kind}")
        if len(self.layers) >= 2 and not self.layers[1].primitive.bounded_activation:
            return ("condition (ii) violated: first hidden layer needs a bounded "
                    f"activation image, got {self.layers[1].primitive.kind}")
        return None

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @property
    def visible_width(self) -> int:
        return self.layers[0].width

    def widths(self) -> tuple[int, ...]:
        return tuple(spec.width for spec in self.layers)

    def full_interaction_matrix(self) -> np.ndarray:
        """Assemble the symmetric block-tridiagonal interaction matrix."""
        widths = self.widths()
        offsets = np.concatenate([[0], np.cumsum(widths)])
        n = offsets[-1]
        W = np.zeros((n, n))
        for h, blk in enumerate(self.weights):
            r0, r1 = offsets[h], offsets[h + 1]
            c0, c1 = offsets[h + 1], offsets[h + 2]
            W[r0:r1, c0:c1] = blk
            W[c0:c1, r0:r1] = blk.T
        return W


@dataclass
class HiddenStates:
    """Per-layer states assembled by the feedforward maps (visible first)."""
    states: tuple[np.ndarray, ...]

    def __getitem__(self, h: int) -> np.ndarray:
        return self.states[h]


def hidden_forward(m: HybridEBM, x1) -> HiddenStates:
    """Propagate the visible state through the static hidden maps:
    x_{h+1} = W_{h+1,h} act_h(x_h) + b_{h+1}."""
    X, single = _rows(x1)
    if X.shape[1] != m.visible_width:
        raise EnergyModelError(f"visible state has width {X.shape[1]}, model expects {m.visible_width}")
    states = [X]
    for h in range(m.n_layers - 1):
        psi = m.layers[h].primitive.activation(states[h])
        states.append(psi @ m.weights[h] + m.biases[h + 1])
    if single:
        return HiddenStates(tuple(s[0] for s in states))
    return HiddenStates(tuple(states))


def energy(m: HybridEBM, x1) -> float | np.ndarray:
    """Scalar energy at the visible state (hidden states substituted).

    E = sum_h [(x_h - b_h) . act_h(x_h) - F_h(x_h)]
        - sum_h act_h(x_h) . W_h act_{h+1}(x_{h+1})
    """
    X, single = _rows(x1)
    hs = hidden_forward(m, X)
    psi = [m.layers[h].primitive.activation(hs[h]) for h in range(m.n_layers)]
    total = np.zeros(X.shape[0])
    for h in range(m.n_layers):
        total += np.sum((hs[h] - m.biases[h]) * psi[h], axis=1)
        total -= np.asarray(m.layers[h].primitive.value(hs[h]))
    for h in range(m.n_layers - 1):
        total -= np.sum((psi[h] @ m.weights[h]) * psi[h + 1], axis=1)
    if not np.isfinite(total).all():
        bad = int(np.argmax(~np.isfinite(total)))
        norms = [float(np.abs(hs[h][bad]).max()) for h in range(m.n_layers)]
        raise EnergyModelError(f"non-finite energy at sample {bad}; per-layer max |state| = {norms}")
    return float(total[0]) if single else total


def energy_rows_graph(m: HybridEBM, X: de.Var,
                      weights: Sequence[de.Var] | None = None,
                      biases: Sequence[de.Var] | None = None) -> de.Var:
    """Per-row energy as a (B, 1) graph node.

    ``weights``/``biases`` override the stored parameters with tape
    variables so the same builder serves evaluation and training.
    """
    tape = X.tape
    Ws = list(weights) if weights is not None else [de.constant(tape, w) for w in m.weights]
    bs = list(biases) if biases is not None else [de.constant(tape, b) for b in m.biases]
    states = [X]
    for h in range(m.n_layers - 1):
        psi = m.layers[h].primitive.activation_graph(states[h])
        states.append(de.matmul(psi, Ws[h]) + bs[h + 1])
    acts = [m.layers[h].primitive.activation_graph(states[h]) for h in range(m.n_layers)]
    total = None
    for h in range(m.n_layers):
        term = de.sum(de.mul(states[h] - bs[h], acts[h]), axis=1)
        term = term - m.layers[h].primitive.value_rows_graph(states[h])
        total = term if total is None else total + term
    for h in range(m.n_layers - 1):
        total = total - de.sum(de.mul(de.matmul(acts[h], Ws[h]), acts[h + 1]), axis=1)
    return total


def conjugate_numeric(p: ConvexPrimitive, y, search_radius: float, n_starts: int = 8,
                      seed: int = 0) -> float:
    """Numeric convex conjugate sup_x x.y - F(x), searched inside the box
    |x_i| <= search_radius.  Test oracle for growth statements; rejects if
    the maximizer lands on the boundary (radius too small)."""
    y = np.asarray(y, dtype=np.float64)
    if not search_radius > 0:
        raise EnergyModelError(f"search radius must be positive, got {search_radius}")
    n = y.size

    def objective(x):
        return float(p.value(x)) - float(x @ y)

    def gradient(x):
        return p.activation(x) - y

    rng = np.random.default_rng(seed)
    starts = [np.zeros(n), np.clip(y, -0.5 * search_radius, 0.5 * search_radius)]
    starts += [rng.uniform(-0.5 * search_radius, 0.5 * search_radius, size=n)
               for _ in range(n_starts)]
    bounds = [(-search_radius, search_radius)] * n
    best_val, best_x = np.inf, None
    for x0 in starts:
        res = optimize.minimize(objective, x0, jac=gradient, method="L-BFGS-B", bounds=bounds)
        if res.fun < best_val:
            best_val, best_x = res.fun, res.x
    if np.any(np.abs(best_x) >= search_radius * (1.0 - 1e-3)):
        raise ConjugateRadiusError(
            f"conjugate maximizer at {best_x} touches the search boundary {search_radius}")
    return -best_val
