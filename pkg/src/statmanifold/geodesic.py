"""Geodesics of alpha-connections by fixed-step classical RK4.

The first-order system is ``xi' = v``, ``v'^k = -Gamma^k_{ij} v^i v^j``.
Integration stops (status ``hit_boundary``) as soon as a stage point leaves
the open parameter box, and never extrapolates past it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .connection import christoffel_at
from .errors import BoundaryError, StatManifoldError
from .family import ParametricFamily
from .integrate import DEFAULT_BUDGET, Budget
from .metric import fisher_matrix

COMPLETED = "completed"
HIT_BOUNDARY = "hit_boundary"
STEP_FAILURE = "step_failure"
EXACT_MAX_DIM = 3


@dataclass(frozen=True)
class GeodesicPath:
    alpha: float
    t: np.ndarray
    xi: np.ndarray
    velocity: np.ndarray
    status: str = COMPLETED
    message: str = ""

    @property
    def endpoint(self) -> np.ndarray:
        return self.xi[-1]

    def rows(self) -> np.ndarray:
        """Samples as rows ``t, xi_1.., v_1..``."""
        return np.column_stack([self.t, self.xi, self.velocity])


class LatticeChristoffel:
    """Christoffel symbols cached on a regular lattice, multilinearly interpolated."""

    def __init__(self, family: ParametricFamily, alpha: float, origin, spacing,
                 budget: Budget = DEFAULT_BUDGET):
        self.family = family
        self.alpha = alpha
        self.origin = np.asarray(origin, dtype=float)
        self.spacing = np.broadcast_to(np.asarray(spacing, dtype=float), self.origin.shape).copy()
        self.budget = budget
        self._cache: dict[tuple, np.ndarray] = {}
        n = self.origin.size
        self._offsets = np.array(np.meshgrid(*[[0, 1]] * n, indexing="ij")).reshape(n, -1).T

    def _node(self, idx: tuple) -> np.ndarray:
        if idx not in self._cache:
            p = self.origin + np.asarray(idx) * self.spacing
            self._cache[idx] = christoffel_at(self.family, p, self.alpha, self.budget)
        return self._cache[idx]

    def __call__(self, xi: np.ndarray) -> np.ndarray:
        u = (xi - self.origin) / self.spacing
        base = np.floor(u).astype(int)
        frac = u - base
        corners = base + self._offsets
        if not all(self.family.domain.contains(self.origin + c * self.spacing) for c in corners):
            return christoffel_at(self.family, xi, self.alpha, self.budget)
        out = 0.0
        for off, c in zip(self._offsets, corners):
            w = np.prod(np.where(off == 1, frac, 1.0 - frac))
            if w != 0.0:
                out = out + w * self._node(tuple(c.tolist()))
        return out


def integrate_geodesic(family: ParametricFamily, xi0, v0, alpha: float, t_end: float,
                       dt: float | None = None, budget: Budget = DEFAULT_BUDGET,
                       mode: str = "auto", lattice_spacing=None) -> GeodesicPath:
    """Integrate the alpha-geodesic from (xi0, v0) over [0, t_end].

    ``mode`` selects exact Christoffel evaluation at every RK stage or a
    lattice cache; ``"auto"`` uses exact evaluation for dim <= 3.
    """
    xi0 = family.check_domain(xi0)
    v0 = np.asarray(v0, dtype=float).reshape(family.dim)
    if t_end <= 0:
        raise ValueError("t_end must be positive")
    dt = t_end / 1000.0 if dt is None else float(dt)
    if dt <= 0:
        raise ValueError("dt must be positive")
    if mode == "auto":
        mode = "exact" if family.dim <= EXACT_MAX_DIM else "lattice"
    if mode == "exact":
        gamma = lambda p: christoffel_at(family, p, alpha, budget)  # noqa: E731
    elif mode == "lattice":
        spacing = 1e-2 * np.maximum(1.0, np.abs(xi0)) if lattice_spacing is None else lattice_spacing
        gamma = LatticeChristoffel(family, alpha, xi0, spacing, budget)
    else:
        raise ValueError(f"unknown Christoffel mode {mode!r}")

    n_steps = max(1, int(math.ceil(t_end / dt - 1e-9)))
    ts, xs, vs = [0.0], [xi0.copy()], [v0.copy()]
    status, message = COMPLETED, ""

    class _Exit(Exception):
        pass

    def rhs(p, v):
        if not np.all(np.isfinite(p)) or not np.all(np.isfinite(v)):
            raise FloatingPointError("non-finite state")
        if not family.domain.contains(p):
            raise _Exit(p)
        C = gamma(p)
        return v, -np.einsum("kij,i,j->k", C, v, v)

    x, v, t = xi0.copy(), v0.copy(), 0.0
    for step in range(n_steps):
        h = min(dt, t_end - t) if step == n_steps - 1 else dt
        try:
            k1x, k1v = rhs(x, v)
            k2x, k2v = rhs(x + 0.5 * h * k1x, v + 0.5 * h * k1v)
            k3x, k3v = rhs(x + 0.5 * h * k2x, v + 0.5 * h * k2v)
            k4x, k4v = rhs(x + h * k3x, v + h * k3v)
            nx = x + h / 6.0 * (k1x + 2 * k2x + 2 * k3x + k4x)
            nv = v + h / 6.0 * (k1v + 2 * k2v + 2 * k3v + k4v)
            if not (np.all(np.isfinite(nx)) and np.all(np.isfinite(nv))):
                raise FloatingPointError("non-finite state")
            if not family.domain.contains(nx):
                raise _Exit(nx)
        except _Exit as exc:
            status = HIT_BOUNDARY
            message = f"left the domain near t={t + h:.6g} at {np.asarray(exc.args[0]).tolist()}"
            break
        except (FloatingPointError, StatManifoldError) as exc:
            status = STEP_FAILURE
            message = f"step failed at t={t:.6g}: {exc}"
            break
        x, v = nx, nv
        t = (step + 1) * dt if step < n_steps - 1 else t_end
        ts.append(t)
        xs.append(x.copy())
        vs.append(v.copy())
    return GeodesicPath(float(alpha), np.array(ts), np.array(xs), np.array(vs), status, message)


def exponential_map(family: ParametricFamily, xi0, v0, alpha: float, dt: float | None = None,
                    budget: Budget = DEFAULT_BUDGET) -> np.ndarray:
    """End point of the unit-time geodesic; raises BoundaryError if it exits the domain."""
    v0 = np.asarray(v0, dtype=float)
    if not np.any(v0):
        return family.check_domain(xi0).copy()
    path = integrate_geodesic(family, xi0, v0, alpha, 1.0, dt, budget)
    if path.status == HIT_BOUNDARY:
        raise BoundaryError(f"geodesic {path.message}", exit_time=float(path.t[-1]))
    if path.status != COMPLETED:
        raise StatManifoldError(path.message)
    return path.endpoint


def path_speeds(family: ParametricFamily, path: GeodesicPath, budget: Budget = DEFAULT_BUDGET) -> np.ndarray:
    """<v, v>_g at every sample of the path."""
    return np.array([v @ fisher_matrix(family, p, budget).entries @ v
                     for p, v in zip(path.xi, path.velocity)])
