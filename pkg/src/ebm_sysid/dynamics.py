"""Vector fields, state-dependent metrics, and the explicit Euler integrator.

Three fields live here: the fully recurrent single-layer field
(-x + W act(x) + b), the hybrid visible-layer field (negative gradient of
the composed energy), and its metric-scaled variant Q(x) f(x).  The
reduced closed-form expansion of the visible field is kept alongside the
autodiff definition; the two are cross-checked by tests and the reduced
form is the fast path for integration and certification.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import diffengine as de
from . import energy_core as ec
from .energy_core import HybridEBM, ConvexPrimitive, _rows

DIVERGENCE_GUARD = 1e9


class DynamicsError(Exception):
    """Invalid field construction or evaluation."""


class ModelConditionError(DynamicsError):
    """The model violates an architectural condition of the reduced field."""


class IntegrationDivergedError(DynamicsError):
    """A trajectory exceeded the divergence guard."""

    def __init__(self, step: int, norm: float):
        super().__init__(f"state norm {norm:.3e} exceeded {DIVERGENCE_GUARD:.0e} at step {step}")
        self.step = step
        self.norm = norm


# ---------------------------------------------------------------------------
# metric fields
# ---------------------------------------------------------------------------

class MetricField:
    """State-dependent matrix Q(x) with uniformly positive symmetric part."""

    kind: str = "base"
    dim: int

    def matrix(self, x) -> np.ndarray:
        """Q at a single state, shape (dim, dim)."""
        return self.matrices(np.asarray(x, dtype=np.float64)[None, :])[0]

    def matrices(self, X) -> np.ndarray:
        raise NotImplementedError

    def apply(self, X, V) -> np.ndarray:
        """Rowwise Q(x_i) v_i."""
        X2, single = _rows(X)
        V2, _ = _rows(V)
        out = np.einsum("bij,bj->bi", self.matrices(X2), V2)
        return out[0] if single else out


@dataclass
class IdentityMetric(MetricField):
    dim: int
    kind: str = "identity"

    def matrices(self, X) -> np.ndarray:
        X2, _ = _rows(X)
        return np.broadcast_to(np.eye(self.dim), (X2.shape[0], self.dim, self.dim)).copy()

    def apply(self, X, V):
        V2, single = _rows(V)
        return V2[0].copy() if single else V2.copy()


@dataclass
class SinCosMetric(MetricField):
    """Planar trig-deformed metric: [[1 + sin(x)/2, 0.3 cos(y)],
    [0.3 cos(y), 1 + cos(x+y)/2]]."""
    kind: str = "sincos"
    dim: int = 2

    def matrices(self, X) -> np.ndarray:
        X2, _ = _rows(X)
        if X2.shape[1] != 2:
            raise DynamicsError(f"sincos metric is planar; got dimension {X2.shape[1]}")
        x, y = X2[:, 0], X2[:, 1]
        Q = np.empty((X2.shape[0], 2, 2))
        Q[:, 0, 0] = 1.0 + np.sin(x) / 2.0
        Q[:, 0, 1] = 0.3 * np.cos(y)
        Q[:, 1, 0] = 0.3 * np.cos(y)
        Q[:, 1, 1] = 1.0 + np.cos(x + y) / 2.0
        return Q


class LearnedPSDMetric(MetricField):
    """Q(x) = eps I + B(x) B(x)^T + Skew(c(x)), all entries bounded.

    B and c come from a two-layer tanh map whose outputs are squashed by
    tanh and scaled by fixed gains, so Q is continuous, uniformly bounded,
    and its symmetric part is bounded below by eps I by construction.
    """

    kind = "learned"

    def __init__(self, dim: int, w1: np.ndarray, b1: np.ndarray, w2: np.ndarray,
                 b2: np.ndarray, eps: float = 0.1, b_gain: float = 2.0, c_gain: float = 1.0):
        if eps < 1e-2:
            raise DynamicsError(f"metric floor eps must be >= 1e-2, got {eps}")
        self.dim = dim
        self.eps = float(eps)
        self.b_gain = float(b_gain)
        self.c_gain = float(c_gain)
        self.w1 = np.asarray(w1, dtype=np.float64)
        self.b1 = np.asarray(b1, dtype=np.float64)
        self.w2 = np.asarray(w2, dtype=np.float64)
        self.b2 = np.asarray(b2, dtype=np.float64)
        n_skew = dim * (dim - 1) // 2
        want_out = dim * dim + n_skew
        if self.w1.shape[1] != dim or self.w2.shape[0] != want_out:
            raise DynamicsError(
                f"metric map shapes {self.w1.shape}, {self.w2.shape} do not fit dim {dim} "
                f"(need {want_out} outputs)")
        iu = np.triu_indices(dim, k=1)
        self._skew_rows, self._skew_cols = iu

    @property
    def hidden_width(self) -> int:
        return self.w1.shape[0]

    def params(self) -> dict[str, np.ndarray]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}

    def with_params(self, params: dict[str, np.ndarray]) -> "LearnedPSDMetric":
        return LearnedPSDMetric(self.dim, params["w1"], params["b1"], params["w2"],
                                params["b2"], eps=self.eps, b_gain=self.b_gain,
                                c_gain=self.c_gain)

    def _features(self, X2: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        h = np.tanh(X2 @ self.w1.T + self.b1)
        raw = np.tanh(h @ self.w2.T + self.b2)
        n2 = self.dim * self.dim
        B = self.b_gain * raw[:, :n2].reshape(-1, self.dim, self.dim)
        c = self.c_gain * raw[:, n2:]
        return B, c

    def matrices(self, X) -> np.ndarray:
        X2, _ = _rows(X)
        if X2.shape[1] != self.dim:
            raise DynamicsError(f"metric expects dimension {self.dim}, got {X2.shape[1]}")
        B, c = self._features(X2)
        Q = self.eps * np.eye(self.dim)[None, :, :] + np.einsum("bik,bjk->bij", B, B)
        Q = Q.copy()
        Q[:, self._skew_rows, self._skew_cols] += c
        Q[:, self._skew_cols, self._skew_rows] -= c
        return Q


def metric_eval(q: MetricField, x) -> np.ndarray:
    """Q(x) as a dense matrix."""
    x = np.asarray(x, dtype=np.float64)
    if not np.isfinite(x).all():
        raise DynamicsError("non-finite state passed to metric_eval")
    return q.matrix(x)


def init_learned_metric(dim: int, hidden: int = 32, eps: float = 0.1, b_gain: float = 2.0,
                        c_gain: float = 1.0, seed: int = 0) -> LearnedPSDMetric:
    """Fresh learned metric; the output bias starts the B block near the
    identity so Q(x) is approximately (1 + eps) I at initialization."""
    rng = np.random.default_rng(seed)
    n_skew = dim * (dim - 1) // 2
    n_out = dim * dim + n_skew
    w1 = rng.uniform(-1.0, 1.0, size=(hidden, dim)) / np.sqrt(dim)
    b1 = np.zeros(hidden)
    w2 = rng.uniform(-1.0, 1.0, size=(n_out, hidden)) / np.sqrt(hidden)
    b2 = np.zeros(n_out)
    target = np.eye(dim).ravel() * min(0.9, 0.9 / b_gain)
    b2[:dim * dim] = np.arctanh(target)
    return LearnedPSDMetric(dim, w1, b1, w2, b2, eps=eps, b_gain=b_gain, c_gain=c_gain)


# ---------------------------------------------------------------------------
# fields
# ---------------------------------------------------------------------------

def recurrent_field(W: np.ndarray, b: np.ndarray, p: ConvexPrimitive, x) -> np.ndarray:
    """Fully recurrent single-layer field -x + W act(x) + b (symmetric W)."""
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2 or W.shape[0] != W.shape[1]:
        raise DynamicsError(f"interaction matrix must be square, got {W.shape}")
    if np.abs(W - W.T).max() > 1e-12:
        raise DynamicsError("interaction matrix must be symmetric (tolerance 1e-12)")
    X, single = _rows(x)
    out = -X + p.activation(X) @ W.T + np.asarray(b, dtype=np.float64)
    return out[0] if single else out


def recurrent_energy(W: np.ndarray, b: np.ndarray, p: ConvexPrimitive, x) -> float | np.ndarray:
    """Energy of the recurrent field: -act.W.act/2 + (x-b).act - F(x)."""
    X, single = _rows(x)
    psi = p.activation(X)
    b = np.asarray(b, dtype=np.float64)
    out = (-0.5 * np.sum((psi @ W.T) * psi, axis=1)
           + np.sum((X - b) * psi, axis=1)
           - np.asarray(p.value(X)))
    return float(out[0]) if single else out


def recurrent_energy_rows_graph(W: np.ndarray, b: np.ndarray, p: ConvexPrimitive):
    """Graph builder (B, d) -> (B, 1) for the recurrent energy, for exact
    gradients via the tape engine."""
    W = np.asarray(W, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)

    def build(X: de.Var) -> de.Var:
        psi = p.activation_graph(X)
        quad = de.sum(de.mul(de.matmul(psi, de.constant(X.tape, W.T)), psi), axis=1) * (-0.5)
        ham = de.sum(de.mul(X - de.constant(X.tape, b), psi), axis=1)
        return quad + ham - p.value_rows_graph(X)

    return build


def energy_gradient(energy_rows_builder: Callable[[de.Var], de.Var], X) -> np.ndarray:
    """Exact gradient rows of a per-row energy graph at the given states."""
    X2, single = _rows(X)
    tape = de.record_scalar(lambda v: de.sum(energy_rows_builder(v["x"])), {"x": X2})
    g = de.backward(tape, ["x"]).gradients["x"]
    return g[0] if single else g


def visible_field(m: HybridEBM, x1) -> np.ndarray:
    """Visible-layer field: negative gradient of the composed energy,
    computed by reverse-mode differentiation (the defining form)."""
    X, single = _rows(x1)
    tape = de.record_scalar(lambda v: de.sum(ec.energy_rows_graph(m, v["x"])), {"x": X})
    g = de.backward(tape, ["x"]).gradients["x"]
    if not np.isfinite(g).all():
        raise DynamicsError("non-finite visible-field gradient; check model weights and state")
    out = -g
    return out[0] if single else out


def reduced_field_summands(m: HybridEBM, x1) -> list[np.ndarray]:
    """Per-layer contributions of the closed-form visible field.

    Summand h (h = 1..L-1) is the feedback term W_h act_{h+1}(x_{h+1})
    pulled back to the visible layer through the activation Jacobians;
    the visible field is -x + b_1 + sum of these.
    """
    violation = m.invariance_condition_violation()
    if violation:
        raise ModelConditionError(violation)
    X, _ = _rows(x1)
    hs = ec.hidden_forward(m, X)
    psi = [m.layers[h].primitive.activation(hs[h]) for h in range(m.n_layers)]
    summands = []
    for h in range(m.n_layers - 1):
        g = psi[h + 1] @ m.weights[h].T
        for k in range(h, 0, -1):
            g = m.layers[k].primitive.jacobian_apply(hs[k], g)
            g = g @ m.weights[k - 1].T
        summands.append(g)
    return summands


def visible_field_reduced(m: HybridEBM, x1) -> np.ndarray:
    """Closed-form visible field -x + b_1 + feedback summands; equals
    ``visible_field`` on models meeting the architectural conditions."""
    X, single = _rows(x1)
    out = -X + m.biases[0]
    for s in reduced_field_summands(m, X):
        out = out + s
    return out[0] if single else out


def ph_field(m: HybridEBM, q: MetricField, x1, *, reduced: bool = False) -> np.ndarray:
    """Metric-scaled field Q(x) f(x)."""
    f = visible_field_reduced(m, x1) if reduced else visible_field(m, x1)
    return q.apply(x1, f)


def field_callable(m: HybridEBM, q: MetricField | None = None) -> Callable[[np.ndarray], np.ndarray]:
    """Fast batched field for integration and sampling (reduced form)."""
    if q is None or isinstance(q, IdentityMetric):
        return lambda X: visible_field_reduced(m, X)
    return lambda X: q.apply(X, visible_field_reduced(m, X))


# ---------------------------------------------------------------------------
# integration
# ---------------------------------------------------------------------------

@dataclass
class Trajectory:
    """Time-indexed states with optional field evaluations."""
    times: np.ndarray
    states: np.ndarray
    field_values: np.ndarray | None = None

    def __post_init__(self):
        if len(self.times) != len(self.states):
            raise DynamicsError("times and states must have equal length")
        if self.field_values is not None and len(self.field_values) != len(self.states):
            raise DynamicsError("field values must align with states")

    def __len__(self) -> int:
        return len(self.times)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        d = self.states.shape[1]
        header = ["t"] + [f"x{i + 1}" for i in range(d)]
        if self.field_values is not None:
            header += [f"f{i + 1}" for i in range(d)]
        writer.writerow(header)
        for k in range(len(self)):
            row = [f"{self.times[k]:.17g}"] + [f"{v:.17g}" for v in self.states[k]]
            if self.field_values is not None:
                row += [f"{v:.17g}" for v in self.field_values[k]]
            writer.writerow(row)
        return buf.getvalue()

    @staticmethod
    def from_csv(text: str) -> "Trajectory":
        rows = list(csv.reader(io.StringIO(text)))
        header, body = rows[0], rows[1:]
        n_x = sum(1 for name in header if name.startswith("x"))
        data = np.array([[float(v) for v in row] for row in body])
        times = data[:, 0]
        states = data[:, 1:1 + n_x]
        fields = data[:, 1 + n_x:] if len(header) > 1 + n_x else None
        return Trajectory(times, states, fields)


def integrate_euler(field: Callable[[np.ndarray], np.ndarray], x0, dt: float,
                    steps: int) -> Trajectory:
    """Explicit Euler rollout x_{k+1} = x_k + dt f(x_k), recording states,
    times, and field values.  Raises IntegrationDivergedError (with the
    step index) if any state norm exceeds the divergence guard."""
    if not dt > 0:
        raise DynamicsError(f"dt must be positive, got {dt}")
    if steps < 1:
        raise DynamicsError(f"steps must be >= 1, got {steps}")
    x = np.asarray(x0, dtype=np.float64).copy()
    states = np.empty((steps + 1, x.size))
    fields = np.empty_like(states)
    states[0] = x
    for k in range(steps):
        f = np.asarray(field(states[k]), dtype=np.float64)
        fields[k] = f
        nxt = states[k] + dt * f
        norm = float(np.linalg.norm(nxt))
        if norm > DIVERGENCE_GUARD:
            raise IntegrationDivergedError(k + 1, norm)
        states[k + 1] = nxt
    fields[steps] = np.asarray(field(states[steps]), dtype=np.float64)
    times = dt * np.arange(steps + 1)
    return Trajectory(times, states, fields)


def rollout_states(field: Callable[[np.ndarray], np.ndarray], X0: np.ndarray, dt: float,
                   steps: int) -> tuple[np.ndarray, np.ndarray]:
    """Batched Euler rollout for many initial rows at once.

    Returns (states, diverged_at): states has shape (steps+1, B, d); rows
    that trip the divergence guard are frozen from that step on and their
    first bad step index is recorded in diverged_at (-1 otherwise).
    """
    X = np.asarray(X0, dtype=np.float64).copy()
    B, d = X.shape
    out = np.empty((steps + 1, B, d))
    out[0] = X
    diverged_at = np.full(B, -1, dtype=np.int64)
    alive = np.ones(B, dtype=bool)
    for k in range(steps):
        cur = out[k]
        f = np.asarray(field(cur), dtype=np.float64)
        nxt = cur + dt * f
        bad = alive & (np.linalg.norm(nxt, axis=1) > DIVERGENCE_GUARD)
        if bad.any():
            diverged_at[bad] = k + 1
            alive &= ~bad
            nxt[bad] = cur[bad]
        nxt[~alive] = cur[~alive]
        out[k + 1] = nxt
    return out, diverged_at
