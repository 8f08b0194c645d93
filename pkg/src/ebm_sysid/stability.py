"""Numerical stability certification.

Everything here samples or bounds quantities over finite sets and states
exactly what it checked: dissipation of the energy along a field, the
growth-exponent classifier for radial unboundedness of recurrent models,
per-layer expansion bounds over a mesh image (a data-restricted
certificate, not a global one), metric bounds, the scaled invariance
radius, and Monte-Carlo inward-flow verification on sphere boundaries.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field as dc_field
from typing import Callable, Sequence

import numpy as np

from . import diffengine as de
from . import dynamics as dyn
from . import energy_core as ec
from ._io import worker_count
from .energy_core import HybridEBM, ConvexPrimitive

DISSIPATION_TOL = 1e-10
KINK_NUDGE = 1e-9


class CertificationError(Exception):
    pass


class MetricPositivityError(CertificationError):
    """The metric's symmetric part is not positive on the mesh."""


# ---------------------------------------------------------------------------
# mesh
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Mesh:
    """Axis-aligned box sampled on a regular grid."""
    box: tuple[tuple[float, float], ...]
    resolution: int

    def __post_init__(self):
        if self.resolution < 2:
            raise CertificationError(f"mesh resolution must be >= 2, got {self.resolution}")
        for lo, hi in self.box:
            if not lo < hi:
                raise CertificationError(f"mesh interval [{lo}, {hi}] is empty")

    @property
    def dim(self) -> int:
        return len(self.box)

    @property
    def n_points(self) -> int:
        return self.resolution ** self.dim

    def points(self) -> np.ndarray:
        axes = [np.linspace(lo, hi, self.resolution) for lo, hi in self.box]
        grids = np.meshgrid(*axes, indexing="ij")
        return np.column_stack([g.ravel() for g in grids])

    def to_json(self) -> dict:
        return {"box": [[float(lo), float(hi)] for lo, hi in self.box],
                "resolution": self.resolution}

    @staticmethod
    def from_json(doc: dict) -> "Mesh":
        return Mesh(tuple((float(lo), float(hi)) for lo, hi in doc["box"]),
                    int(doc["resolution"]))


def _chunks(X: np.ndarray, size: int = 8192):
    for i in range(0, len(X), size):
        yield X[i:i + size]


def _map_chunks(fn: Callable[[np.ndarray], object], X: np.ndarray, size: int = 8192) -> list:
    """Apply fn to row chunks, optionally in worker threads; chunk order is
    preserved so order-sensitive reductions stay deterministic."""
    parts = list(_chunks(X, size))
    workers = min(worker_count(), len(parts))
    if workers <= 1:
        return [fn(p) for p in parts]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, parts))


# ---------------------------------------------------------------------------
# dissipation
# ---------------------------------------------------------------------------

@dataclass
class DissipationReport:
    max_lie: float
    n_samples: int
    n_violations: int
    n_flagged: int
    tol: float = DISSIPATION_TOL

    @property
    def passed(self) -> bool:
        return self.max_lie <= self.tol


def dissipation_check(energy_rows_builder: Callable[[de.Var], de.Var],
                      field: Callable[[np.ndarray], np.ndarray],
                      samples: np.ndarray, tol: float = DISSIPATION_TOL,
                      nudge_kinks: bool = True) -> DissipationReport:
    """Max of grad E(x) . field(x) over the samples; PASS iff <= tol.

    ``energy_rows_builder`` maps a (B, d) tape variable to per-row energy
    values, so the gradient is exact.  Coordinates sitting exactly on a
    |.|^p kink are nudged by 1e-9 and counted as flagged (the dissipation
    statement holds almost everywhere).
    """
    X = np.asarray(samples, dtype=np.float64).copy()
    flagged = 0
    if nudge_kinks:
        on_kink = X == 0.0
        flagged = int(on_kink.sum())
        X[on_kink] = KINK_NUDGE
    max_lie = -np.inf
    violations = 0
    for chunk in _chunks(X):
        grads = dyn.energy_gradient(energy_rows_builder, chunk)
        fvals = np.asarray(field(chunk), dtype=np.float64)
        if not (np.isfinite(grads).all() and np.isfinite(fvals).all()):
            raise CertificationError("non-finite evaluation during dissipation check")
        lie = np.sum(grads * fvals, axis=1)
        max_lie = max(max_lie, float(lie.max()))
        violations += int(np.sum(lie > tol))
    return DissipationReport(max_lie=max_lie, n_samples=len(X), n_violations=violations,
                             n_flagged=flagged, tol=tol)


@dataclass
class MonotonicityReport:
    n_steps: int
    n_violations: int
    max_excess: float

    @property
    def passed(self) -> bool:
        return self.n_violations == 0


def trajectory_monotonicity(energy_values: Callable[[np.ndarray], np.ndarray],
                            traj: dyn.Trajectory) -> MonotonicityReport:
    """Discrete-time energy descent along an Euler trajectory.

    Each step may exceed the previous energy by at most
    10 dt^2 (1 + |f(x_k)|^2), the one-step discretization slack.
    """
    if traj.field_values is None:
        raise CertificationError("trajectory lacks field values; integrate with integrate_euler")
    E = np.asarray(energy_values(traj.states), dtype=np.float64)
    dt = float(traj.times[1] - traj.times[0]) if len(traj) > 1 else 0.0
    f2 = np.sum(traj.field_values[:-1] ** 2, axis=1)
    tol = 10.0 * dt * dt * (1.0 + f2)
    excess = E[1:] - E[:-1] - tol
    return MonotonicityReport(n_steps=len(E) - 1, n_violations=int(np.sum(excess > 0)),
                              max_excess=float(excess.max(initial=-np.inf)))


# ---------------------------------------------------------------------------
# growth classification
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RecurrentEBM:
    """Fully recurrent single-layer model (symmetric W)."""
    W: np.ndarray
    b: np.ndarray
    primitive: ConvexPrimitive


@dataclass
class GrowthVerdict:
    q: float
    radially_unbounded: bool
    empirical_slopes: dict[str, float]
    notes: list[str] = dc_field(default_factory=list)
    min_energy_at_max_radius: float = np.nan
    witness_energy_at_max_radius: float = np.nan

    @property
    def conditions_met(self) -> bool:
        return not self.notes


def _hybrid_blockwise(m: HybridEBM):
    widths = m.widths()
    offsets = np.concatenate([[0], np.cumsum(widths)])

    def split(x: np.ndarray) -> list[np.ndarray]:
        return [x[offsets[h]:offsets[h + 1]] for h in range(m.n_layers)]

    def act(x: np.ndarray) -> np.ndarray:
        return np.concatenate([m.layers[h].primitive.activation(xh)
                               for h, xh in enumerate(split(x))])

    def val(x: np.ndarray) -> float:
        return sum(float(m.layers[h].primitive.value(xh))
                   for h, xh in enumerate(split(x)))

    return act, val


def growth_classify(model: RecurrentEBM | HybridEBM, n_rays: int = 16,
                    seed: int = 0) -> GrowthVerdict:
    """Symbolic radial-unboundedness verdict (growth exponent < 2) plus
    empirical log-log slope fits of the energy split along rays.

    The split is E = E_quad + E_ham with E_quad = -act.W.act/2 (expected
    slope 2(q-1)) and E_ham = x.act - F(x) (expected slope q).  The
    symbolic rule needs a dense W with a positive top eigenvalue and a
    power-law primitive; violations are recorded as notes and the
    empirical fits stand on their own.
    """
    notes: list[str] = []
    if isinstance(model, HybridEBM):
        W = model.full_interaction_matrix()
        act, val = _hybrid_blockwise(model)
        q = max(spec.primitive.growth_exponent for spec in model.layers)
        notes.append("conditions not met: layered interaction matrix has zero blocks")
        power_law = all(spec.primitive.kind in ("quadratic", "powernorm")
                        for spec in model.layers)
    else:
        W = np.asarray(model.W, dtype=np.float64)
        p = model.primitive
        act, val = p.activation, lambda x: float(p.value(x))
        q = p.growth_exponent
        power_law = p.kind in ("quadratic", "powernorm")
        if np.any(W == 0.0):
            notes.append("conditions not met: W has zero entries")
    eigvals, eigvecs = np.linalg.eigh(W)
    lam_max = float(eigvals[-1])
    if lam_max <= 0.0:
        notes.append("conditions not met: W has no positive eigenvalue")
    if not power_law:
        notes.append("conditions not met: primitive is not power-law "
                     "(bounded-gradient growth, exponent below the classifier's range)")

    dim = W.shape[0]
    rng = np.random.default_rng(seed)
    rays = rng.standard_normal((n_rays, dim))
    rays /= np.linalg.norm(rays, axis=1, keepdims=True)
    witness = None
    if power_law and lam_max > 0.0:
        # preimage of the top eigenvector under the activation: along this
        # ray the quadratic term grows at the top eigenvalue's rate
        v = eigvecs[:, -1]
        witness = np.sign(v) * np.abs(v) ** (1.0 / (q - 1.0)) if q > 1.0 else v.copy()
        witness /= np.linalg.norm(witness)
        rays = np.vstack([rays, witness])

    radii = np.logspace(1.0, 4.0, 13)
    log_r = np.log(radii)
    quad_slopes, ham_slopes = [], []
    totals_at_max = []
    witness_total = np.nan
    for i, u in enumerate(rays):
        eq = np.empty(len(radii))
        eh = np.empty(len(radii))
        for k, t in enumerate(radii):
            x = t * u
            psi = act(x)
            eq[k] = -0.5 * psi @ W @ psi
            eh[k] = x @ act(x) - val(x)
        with np.errstate(divide="ignore", invalid="ignore"):
            lq = np.log(np.abs(eq))
            lh = np.log(np.abs(eh))
        if np.isfinite(lq).all():
            quad_slopes.append(np.polyfit(log_r, lq, 1)[0])
        if np.isfinite(lh).all():
            ham_slopes.append(np.polyfit(log_r, lh, 1)[0])
        total = eq[-1] + eh[-1]
        totals_at_max.append(total)
        if witness is not None and i == len(rays) - 1:
            witness_total = total
    slopes = {
        "quad": float(np.mean(quad_slopes)) if quad_slopes else np.nan,
        "ham": float(np.mean(ham_slopes)) if ham_slopes else np.nan,
    }
    return GrowthVerdict(q=float(q), radially_unbounded=bool(q < 2.0),
                         empirical_slopes=slopes, notes=notes,
                         min_energy_at_max_radius=float(np.min(totals_at_max)),
                         witness_energy_at_max_radius=float(witness_total))


# ---------------------------------------------------------------------------
# expansion radius and metric bounds
# ---------------------------------------------------------------------------

def gamma_bounds(m: HybridEBM, mesh: Mesh) -> np.ndarray:
    """Per-layer expansion bounds over the mesh image: the max norm of each
    feedback summand of the reduced visible field, with hidden states
    restricted to the forward image of the mesh (data-restricted)."""
    violation = m.invariance_condition_violation()
    if violation:
        raise dyn.ModelConditionError(violation)
    pts = mesh.points()
    if pts.shape[1] != m.visible_width:
        raise CertificationError(
            f"mesh dimension {pts.shape[1]} does not match visible width {m.visible_width}")

    def chunk_max(chunk: np.ndarray) -> np.ndarray:
        summands = dyn.reduced_field_summands(m, chunk)
        return np.array([np.linalg.norm(s, axis=1).max() for s in summands])

    per_chunk = _map_chunks(chunk_max, pts)
    return np.max(np.vstack(per_chunk), axis=0)


def expansion_radius(m: HybridEBM, mesh: Mesh) -> float:
    """Sum of the per-layer bounds; radius of the certified absorbing ball
    (over the explored image)."""
    return float(np.sum(gamma_bounds(m, mesh)))


def first_layer_gamma_simplex_exact(m: HybridEBM) -> float:
    """Exact global bound on the first feedback summand when the first
    hidden layer is a softmax: max over the closed simplex of ||W p||,
    attained at a vertex, i.e. the largest column norm of the coupling."""
    if m.n_layers < 2 or m.layers[1].primitive.kind != "logsumexp":
        raise CertificationError("exact simplex bound needs a softmax first hidden layer")
    return float(np.linalg.norm(m.weights[0], axis=0).max())


def metric_bounds(q: dyn.MetricField, mesh: Mesh) -> tuple[float, float]:
    """(q_min, q_max) over the mesh: the smallest eigenvalue of the
    symmetric part and the largest spectral norm of Q(x)."""
    pts = mesh.points()

    def chunk_bounds(chunk: np.ndarray) -> tuple[float, float]:
        Q = q.matrices(chunk)
        sym = (Q + np.transpose(Q, (0, 2, 1))) / 2.0
        lo = float(np.linalg.eigvalsh(sym)[:, 0].min())
        hi = float(np.linalg.svd(Q, compute_uv=False)[:, 0].max())
        return lo, hi

    results = _map_chunks(chunk_bounds, pts)
    q_min = min(r[0] for r in results)
    q_max = max(r[1] for r in results)
    if q_min <= 0.0:
        raise MetricPositivityError(
            f"metric symmetric part has minimum eigenvalue {q_min:.3e} <= 0 on the mesh")
    return q_min, q_max


def ph_radius(r_ex: float, q_min: float, q_max: float) -> float:
    """Invariance radius under the metric: (q_max / q_min) r_ex."""
    if not q_min > 0:
        raise MetricPositivityError(f"q_min must be positive, got {q_min}")
    return (q_max / q_min) * r_ex


# ---------------------------------------------------------------------------
# boundary verification
# ---------------------------------------------------------------------------

@dataclass
class BoundaryStats:
    radius: float
    samples: int
    inward_fraction: float
    max_inner_product: float
    seed: int

    @property
    def passed(self) -> bool:
        return self.inward_fraction == 1.0

    def to_json(self) -> dict:
        return {"radius": self.radius, "samples": self.samples,
                "inward_fraction": self.inward_fraction,
                "max_inner_product": self.max_inner_product, "seed": self.seed}

    @staticmethod
    def from_json(doc: dict) -> "BoundaryStats":
        return BoundaryStats(float(doc["radius"]), int(doc["samples"]),
                             float(doc["inward_fraction"]), float(doc["max_inner_product"]),
                             int(doc["seed"]))


def invariance_verify(field: Callable[[np.ndarray], np.ndarray], R: float, n: int,
                      seed: int, dim: int = 2) -> BoundaryStats:
    """Sample n uniform points on the radius-R sphere and report the
    fraction with inward flow x . f(x) <= 0 and the worst inner product.
    PASS means fraction exactly 1."""
    if R < 0:
        raise CertificationError(f"radius must be nonnegative, got {R}")
    if n < 1:
        raise CertificationError(f"sample count must be >= 1, got {n}")
    rng = np.random.default_rng(np.random.PCG64(seed))
    Z = rng.standard_normal((n, dim))
    if R == 0.0:
        X = np.zeros((n, dim))
    else:
        X = R * Z / np.linalg.norm(Z, axis=1, keepdims=True)

    inward = 0
    max_ip = -np.inf
    for chunk in _chunks(X, 16384):
        F = np.asarray(field(chunk), dtype=np.float64)
        ip = np.sum(chunk * F, axis=1)
        inward += int(np.sum(ip <= 0.0))
        max_ip = max(max_ip, float(ip.max()))
    return BoundaryStats(radius=float(R), samples=n, inward_fraction=inward / n,
                         max_inner_product=max_ip, seed=seed)


# ---------------------------------------------------------------------------
# certificate
# ---------------------------------------------------------------------------

@dataclass
class CertificationReport:
    """Data-restricted invariance certificate for one checkpoint."""
    gamma: list[float]
    r_ex: float
    q_min: float
    q_max: float
    rho_ex: float
    boundary_stats: BoundaryStats
    mesh: Mesh
    model_hash: str
    tool_version: str
    scope: str = "data-restricted certificate"

    def __post_init__(self):
        if self.r_ex != float(np.sum(np.asarray(self.gamma))):
            raise CertificationError("r_ex must equal the sum of the gamma bounds exactly")
        if self.rho_ex != (self.q_max / self.q_min) * self.r_ex:
            raise CertificationError("rho_ex must equal (q_max/q_min) r_ex exactly")
        if not 0 < self.q_min <= self.q_max:
            raise CertificationError(f"need 0 < q_min <= q_max, got {self.q_min}, {self.q_max}")

    def to_json(self) -> dict:
        return {
            "gamma": [float(g) for g in self.gamma],
            "r_ex": self.r_ex,
            "q_min": self.q_min,
            "q_max": self.q_max,
            "rho_ex": self.rho_ex,
            "boundary_stats": self.boundary_stats.to_json(),
            "mesh": self.mesh.to_json(),
            "model_hash": self.model_hash,
            "tool_version": self.tool_version,
            "scope": self.scope,
        }

    @staticmethod
    def from_json(doc: dict) -> "CertificationReport":
        return CertificationReport(
            gamma=[float(g) for g in doc["gamma"]],
            r_ex=float(doc["r_ex"]),
            q_min=float(doc["q_min"]),
            q_max=float(doc["q_max"]),
            rho_ex=float(doc["rho_ex"]),
            boundary_stats=BoundaryStats.from_json(doc["boundary_stats"]),
            mesh=Mesh.from_json(doc["mesh"]),
            model_hash=doc["model_hash"],
            tool_version=doc["tool_version"],
            scope=doc.get("scope", "data-restricted certificate"),
        )


def certify(model: HybridEBM, metric: dyn.MetricField, mesh: Mesh, *,
            n_boundary: int = 100_000, seed: int = 0, boundary_scale: float = 1.01,
            model_hash: str = "", tool_version: str = "") -> CertificationReport:
    """Full certification pass: expansion bounds over the mesh image,
    metric bounds, scaled radius, and boundary verification of the
    metric-scaled field at boundary_scale * rho_ex."""
    gamma = gamma_bounds(model, mesh)
    r_ex = float(np.sum(gamma))
    q_min, q_max = metric_bounds(metric, mesh)
    rho_ex = ph_radius(r_ex, q_min, q_max)
    field = dyn.field_callable(model, metric)
    stats = invariance_verify(field, boundary_scale * rho_ex, n_boundary, seed,
                              dim=model.visible_width)
    return CertificationReport(gamma=[float(g) for g in gamma], r_ex=r_ex, q_min=q_min,
                               q_max=q_max, rho_ex=rho_ex, boundary_stats=stats, mesh=mesh,
                               model_hash=model_hash, tool_version=tool_version)
