"""Riemann curvature of alpha-connections by finite differences of Christoffels.

Convention: ``R(d_i, d_j) d_k = R^l_{kij} d_l`` with

    R^l_{kij} = d_i G^l_{jk} - d_j G^l_{ik} + G^l_{im} G^m_{jk} - G^l_{jm} G^m_{ik},

so the hyperbolic plane has sectional curvature -1.  Arrays are indexed
``[l, k, i, j]``; the lowered tensor is ``R_{lkij} = g_{lm} R^m_{kij}``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _numdiff
from .connection import alpha_connection, christoffel_second_kind, geometry_at
from .errors import DegeneracyError, DomainError
from .family import ParametricFamily
from .integrate import DEFAULT_BUDGET, Budget
from .metric import FisherMatrix, inner_product, require_same_point

COEFFICIENT_FLAT_TOL = 1e-5
CURVATURE_FLAT_TOL = 1e-4
DEFAULT_H_SCALE = 1e-3


@dataclass(frozen=True)
class CurvatureTensor:
    at: tuple
    alpha: float
    entries: np.ndarray
    lowered: np.ndarray
    h: tuple

    @property
    def max_abs(self) -> float:
        return float(np.max(np.abs(self.entries))) if self.entries.size else 0.0

    def antisymmetry_residual(self) -> float:
        """max |R_{lkij} + R_{lkji}|."""
        return float(np.max(np.abs(self.lowered + np.swapaxes(self.lowered, 2, 3))))

    def pair_antisymmetry_residual(self) -> float:
        """max |R_{lkij} + R_{klij}| (zero for metric connections)."""
        return float(np.max(np.abs(self.lowered + np.swapaxes(self.lowered, 0, 1))))


def default_step(xi, domain=None) -> np.ndarray:
    """``1e-3 * max(1, |xi_i|)``, capped by the distance to the domain bounds."""
    xi = np.asarray(xi, dtype=float)
    if domain is None:
        return _numdiff.steps(xi, DEFAULT_H_SCALE)
    return _numdiff.domain_steps(domain, xi, DEFAULT_H_SCALE)


def riemann_tensor(family: ParametricFamily, xi, alpha: float, h=None,
                   budget: Budget = DEFAULT_BUDGET) -> CurvatureTensor:
    xi = family.check_domain(xi)
    n = family.dim
    h = default_step(xi, family.domain) if h is None else np.broadcast_to(np.asarray(h, dtype=float), xi.shape).copy()
    for k in range(n):
        for sgn in (1.0, -1.0):
            p = xi.copy()
            p[k] += sgn * h[k]
            if not family.domain.contains(p):
                raise DomainError(
                    f"curvature stencil point {p.tolist()} leaves the domain; use a smaller h "
                    f"(current h[{k}] = {h[k]:.3g})")

    g, gamma = geometry_at(family, xi, alpha, budget)
    C = christoffel_second_kind(gamma, g)

    def christoffel(p):
        gp, cp = geometry_at(family, p, alpha, budget)
        return christoffel_second_kind(cp, gp)

    # dC[i, l, j, k] = d_i Gamma^l_{jk}
    dC = _numdiff.central_derivative(christoffel, xi, h)
    R = (np.einsum("iljk->lkij", dC) - np.einsum("jlik->lkij", dC)
         + np.einsum("lim,mjk->lkij", C, C) - np.einsum("ljm,mik->lkij", C, C))
    lowered = np.einsum("lm,mkij->lkij", g.entries, R)
    return CurvatureTensor(tuple(xi.tolist()), float(alpha), R, lowered, tuple(h.tolist()))


def sectional_curvature(R: CurvatureTensor, g: FisherMatrix, X, Y) -> float:
    """K(X, Y) = R(X, Y, Y, X) / (|X|^2 |Y|^2 - <X, Y>^2)."""
    require_same_point(R.at, g.at, "curvature tensor and metric")
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    den = inner_product(g, X, X) * inner_product(g, Y, Y) - inner_product(g, X, Y) ** 2
    if den < 1e-12:
        raise DegeneracyError("X and Y span a degenerate plane")
    num = np.einsum("lkij,l,k,i,j->", R.lowered, X, Y, X, Y)
    return float(num / den)


@dataclass(frozen=True)
class FlatnessReport:
    alpha: float
    points: np.ndarray
    max_abs_connection: float
    max_abs_curvature: float
    per_point_connection: np.ndarray
    per_point_curvature: np.ndarray
    coefficient_tol: float = COEFFICIENT_FLAT_TOL
    curvature_tol: float = CURVATURE_FLAT_TOL

    @property
    def flat_coefficients(self) -> bool:
        return self.max_abs_connection < self.coefficient_tol

    @property
    def flat_curvature(self) -> bool:
        return self.max_abs_curvature < self.curvature_tol

    @property
    def flat(self) -> bool:
        return self.flat_coefficients and self.flat_curvature

    def to_json(self) -> dict:
        return {
            "alpha": self.alpha,
            "points": self.points.tolist(),
            "max_abs_connection": self.max_abs_connection,
            "max_abs_curvature": self.max_abs_curvature,
            "coefficient_tol": self.coefficient_tol,
            "curvature_tol": self.curvature_tol,
            "flat_coefficients": self.flat_coefficients,
            "flat_curvature": self.flat_curvature,
        }


def flatness_report(family: ParametricFamily, region, alpha: float, h=None,
                    budget: Budget = DEFAULT_BUDGET) -> FlatnessReport:
    """Max |Gamma^(alpha)| and max |R^(alpha)| over a grid of parameter points."""
    pts = np.atleast_2d(np.asarray(region, dtype=float))
    conn, curv = [], []
    for p in pts:
        conn.append(float(np.max(np.abs(alpha_connection(family, p, alpha, budget).entries))))
        curv.append(riemann_tensor(family, p, alpha, h, budget).max_abs)
    return FlatnessReport(float(alpha), pts, max(conn), max(curv), np.array(conn), np.array(curv))
