"""Planar ground-truth systems: potentials with analytic gradients, a
state-dependent metric, and a sign convention.

The identified field is sign * Q(x) grad V(x); sign -1 (the default)
makes minima of V attracting.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import optimize

from .. import dynamics as dyn
from ..energy_core import _rows


class GroundTruthError(Exception):
    pass


def _require_positive(**params):
    for name, value in params.items():
        if not value > 0:
            raise GroundTruthError(f"potential parameter {name} must be positive, got {value}")


@dataclass(frozen=True)
class MultiWellPotential:
    """V(x, y) = alpha (x^2 + beta y^2) + omega sin(gamma x) cos(y):
    a quadratic bowl rippled into several wells."""
    alpha: float = 0.5
    beta: float = 1.0
    omega: float = 1.0
    gamma: float = 3.0

    def __post_init__(self):
        _require_positive(alpha=self.alpha, beta=self.beta, omega=self.omega, gamma=self.gamma)

    def value(self, xy) -> np.ndarray | float:
        X, single = _rows(xy)
        x, y = X[:, 0], X[:, 1]
        v = self.alpha * (x ** 2 + self.beta * y ** 2) + self.omega * np.sin(self.gamma * x) * np.cos(y)
        return float(v[0]) if single else v

    def grad(self, xy) -> np.ndarray:
        X, single = _rows(xy)
        x, y = X[:, 0], X[:, 1]
        gx = 2.0 * self.alpha * x + self.omega * self.gamma * np.cos(self.gamma * x) * np.cos(y)
        gy = 2.0 * self.alpha * self.beta * y - self.omega * np.sin(self.gamma * x) * np.sin(y)
        out = np.column_stack([gx, gy])
        return out[0] if single else out


@dataclass(frozen=True)
class ExoticPotential:
    """Quartic ring plus trig ripples and a cubic tilt: a ring-shaped
    valley with rotation-inducing cross terms."""
    alpha: float = 1.0
    omega: float = 0.5
    gamma: float = 3.0
    zeta: float = 3.0
    xi: float = 0.3
    theta: float = 0.3
    rho: float = 2.0
    delta: float = 0.2

    def __post_init__(self):
        _require_positive(alpha=self.alpha, omega=self.omega, gamma=self.gamma, zeta=self.zeta,
                          xi=self.xi, theta=self.theta, rho=self.rho, delta=self.delta)

    def value(self, xy) -> np.ndarray | float:
        X, single = _rows(xy)
        x, y = X[:, 0], X[:, 1]
        v = (self.alpha * (x ** 2 + y ** 2 - 1.0) ** 2
             + self.omega * np.sin(self.gamma * x) * np.cos(self.zeta * y)
             + self.xi * np.sin(x ** 2 - y ** 2)
             + self.theta * np.cos(self.rho * x * y)
             + self.delta * (x ** 2 * y - y ** 3))
        return float(v[0]) if single else v

    def grad(self, xy) -> np.ndarray:
        X, single = _rows(xy)
        x, y = X[:, 0], X[:, 1]
        ring = x ** 2 + y ** 2 - 1.0
        gx = (4.0 * self.alpha * x * ring
              + self.omega * self.gamma * np.cos(self.gamma * x) * np.cos(self.zeta * y)
              + 2.0 * self.xi * x * np.cos(x ** 2 - y ** 2)
              - self.theta * self.rho * y * np.sin(self.rho * x * y)
              + 2.0 * self.delta * x * y)
        gy = (4.0 * self.alpha * y * ring
              - self.omega * self.zeta * np.sin(self.gamma * x) * np.sin(self.zeta * y)
              - 2.0 * self.xi * y * np.cos(x ** 2 - y ** 2)
              - self.theta * self.rho * x * np.sin(self.rho * x * y)
              + self.delta * (x ** 2 - 3.0 * y ** 2))
        out = np.column_stack([gx, gy])
        return out[0] if single else out


@dataclass(frozen=True)
class GroundTruth:
    potential: MultiWellPotential | ExoticPotential
    metric: dyn.MetricField
    sign: int = -1

    def __post_init__(self):
        if self.sign not in (-1, 1):
            raise GroundTruthError(f"sign must be +1 or -1, got {self.sign}")

    def field(self, xy) -> np.ndarray:
        return self.sign * self.metric.apply(xy, self.potential.grad(xy))


def potential_minima(potential, box=((-2.0, 2.0), (-2.0, 2.0)), n_starts: int = 400,
                     seed: int = 0, grad_tol: float = 1e-8, merge_dist: float = 1e-2,
                     hess_floor: float = 1e-6) -> np.ndarray:
    """Local minima of V inside the box, by multi-start quasi-Newton descent.

    Independent of any learned model: descends V itself from seeded
    uniform starts, keeps converged points with a tiny gradient and a
    positive-definite finite-difference Hessian, and merges duplicates.
    """
    rng = np.random.default_rng(seed)
    lo = np.array([b[0] for b in box])
    hi = np.array([b[1] for b in box])
    starts = lo + (hi - lo) * rng.random((n_starts, 2))
    found: list[np.ndarray] = []
    for x0 in starts:
        res = optimize.minimize(lambda z: float(potential.value(z)),
                                x0, jac=lambda z: potential.grad(z), method="BFGS",
                                options={"gtol": 1e-10, "maxiter": 200})
        z = res.x
        if np.linalg.norm(potential.grad(z)) > grad_tol:
            continue
        if np.any(z < lo - 0.5) or np.any(z > hi + 0.5):
            continue
        h = 1e-4
        H = np.empty((2, 2))
        for i in range(2):
            e = np.zeros(2)
            e[i] = h
            H[:, i] = (potential.grad(z + e) - potential.grad(z - e)) / (2 * h)
        H = (H + H.T) / 2.0
        if np.linalg.eigvalsh(H)[0] <= hess_floor:
            continue
        if not any(np.linalg.norm(z - c) < merge_dist for c in found):
            found.append(z)
    if not found:
        raise GroundTruthError("no local minima found in the box; check parameters")
    order = np.lexsort((np.array(found)[:, 1], np.array(found)[:, 0]))
    return np.array(found)[order]
