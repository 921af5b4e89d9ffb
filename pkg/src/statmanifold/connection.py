"""alpha-connections, the skewness tensor and index raising.

Coefficient arrays of the first kind are indexed ``[i, j, k]`` for
Gamma_{ij,k}; second-kind arrays are indexed ``[k, i, j]`` for Gamma^k_{ij}.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BasePointMismatch
from .family import ParametricFamily, raw_hessian, raw_score
from .integrate import DEFAULT_BUDGET, Budget, expect
from .metric import FisherMatrix, _finish, inverse_metric, require_same_point, SCORE_OUTER


@dataclass(frozen=True)
class ConnectionCoefficients:
    at: tuple
    alpha: float
    entries: np.ndarray
    raw_asymmetry: float = 0.0
    converged: bool = True

    def to_json(self) -> dict:
        return {"at": list(self.at), "alpha": self.alpha, "entries": self.entries.tolist(),
                "raw_asymmetry": self.raw_asymmetry, "converged": self.converged}


@dataclass(frozen=True)
class SkewnessTensor:
    at: tuple
    entries: np.ndarray
    raw_asymmetry: float = 0.0
    converged: bool = True


_PERMS = [(0, 1, 2), (0, 2, 1), (1, 0, 2), (1, 2, 0), (2, 0, 1), (2, 1, 0)]


def _connection_integrand(family, xi, alpha):
    c = 0.5 * (1.0 - alpha)

    def f(x):
        s = raw_score(family, x, xi)
        H = raw_hessian(family, x, xi)
        inner = H + c * s[:, None, :] * s[None, :, :]
        return inner[:, :, None, :] * s[None, None, :, :]

    return f


def _symmetrize_ij(raw: np.ndarray):
    sym = 0.5 * (raw + np.transpose(raw, (1, 0, 2)))
    return sym, float(np.max(np.abs(raw - sym))) if raw.size else 0.0


def alpha_connection(family: ParametricFamily, xi, alpha: float,
                     budget: Budget = DEFAULT_BUDGET) -> ConnectionCoefficients:
    """Gamma^(alpha)_{ij,k} = E[(d_i d_j l + (1 - alpha)/2 d_i l d_j l) d_k l].

    Each entry is one joint expectation; the result is symmetrised in (i, j)
    and the pre-symmetrisation asymmetry is kept as a diagnostic.
    """
    xi = family.check_domain(xi)
    res = expect(family, xi, _connection_integrand(family, xi, float(alpha)), budget)
    raw = np.asarray(res.value, dtype=float).reshape((family.dim,) * 3)
    sym, asym = _symmetrize_ij(raw)
    return ConnectionCoefficients(tuple(xi.tolist()), float(alpha), sym, asym, res.converged)


def skewness_tensor(family: ParametricFamily, xi, budget: Budget = DEFAULT_BUDGET) -> SkewnessTensor:
    """T_ijk = E[d_i l d_j l d_k l], fully symmetrised."""
    xi = family.check_domain(xi)

    def f(x):
        s = raw_score(family, x, xi)
        return s[:, None, None, :] * s[None, :, None, :] * s[None, None, :, :]

    res = expect(family, xi, f, budget)
    raw = np.asarray(res.value, dtype=float).reshape((family.dim,) * 3)
    sym = sum(np.transpose(raw, p) for p in _PERMS) / 6.0
    return SkewnessTensor(tuple(xi.tolist()), sym, float(np.max(np.abs(raw - sym))), res.converged)


def convert_connection(gamma: ConnectionCoefficients, T: SkewnessTensor, beta: float) -> ConnectionCoefficients:
    """Gamma^(beta) = Gamma^(alpha) + (alpha - beta)/2 T."""
    require_same_point(gamma.at, T.at, "connection and skewness tensor")
    beta = float(beta)
    if beta == gamma.alpha:
        return gamma
    entries = gamma.entries + 0.5 * (gamma.alpha - beta) * T.entries
    return ConnectionCoefficients(gamma.at, beta, entries, gamma.raw_asymmetry,
                                  gamma.converged and T.converged)


def christoffel_second_kind(gamma: ConnectionCoefficients, g: FisherMatrix) -> np.ndarray:
    """Gamma^k_{ij} = g^{km} Gamma_{ij,m}, indexed ``[k, i, j]``."""
    require_same_point(gamma.at, g.at, "connection and metric")
    ginv = inverse_metric(g)
    return np.einsum("km,ijm->kij", ginv, gamma.entries)


def geometry_at(family: ParametricFamily, xi, alpha: float, budget: Budget = DEFAULT_BUDGET):
    """Fisher matrix and alpha-connection from one joint quadrature pass.

    Used where both are needed repeatedly (geodesics, curvature stencils).
    """
    xi = family.check_domain(xi)
    n = family.dim
    conn = _connection_integrand(family, xi, float(alpha))

    def f(x):
        s = raw_score(family, x, xi)
        gpart = (s[:, None, :] * s[None, :, :]).reshape(n * n, -1)
        return np.concatenate([gpart, conn(x).reshape(n ** 3, -1)])

    res = expect(family, xi, f, budget)
    val = np.asarray(res.value, dtype=float)
    err = np.asarray(res.error_estimate, dtype=float)
    g = _finish(xi, val[: n * n].reshape(n, n), err[: n * n], res.converged, SCORE_OUTER)
    sym, asym = _symmetrize_ij(val[n * n:].reshape(n, n, n))
    return g, ConnectionCoefficients(tuple(xi.tolist()), float(alpha), sym, asym, res.converged)


def christoffel_at(family: ParametricFamily, xi, alpha: float, budget: Budget = DEFAULT_BUDGET) -> np.ndarray:
    g, gamma = geometry_at(family, xi, alpha, budget)
    return christoffel_second_kind(gamma, g)
