"""Fisher information metric in its score-outer and negative-Hessian forms."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _numdiff
from .errors import BasePointMismatch, DegeneracyError, DimensionError
from .family import ParametricFamily, raw_hessian, raw_score
from .integrate import DEFAULT_BUDGET, Budget, expect

SCORE_OUTER = "score_outer"
NEG_HESSIAN = "neg_hessian"
PD_RELATIVE_TOL = 1e-10


@dataclass(frozen=True)
class FisherMatrix:
    at: tuple
    entries: np.ndarray
    form: str = SCORE_OUTER
    error_estimate: float = 0.0
    converged: bool = True

    @property
    def dim(self) -> int:
        return self.entries.shape[0]

    @property
    def condition_number(self) -> float:
        w = np.linalg.eigvalsh(self.entries)
        return float(w[-1] / w[0])

    def to_json(self) -> dict:
        return {
            "at": list(self.at),
            "form": self.form,
            "entries": self.entries.tolist(),
            "inverse": inverse_metric(self).tolist(),
            "condition_number": self.condition_number,
            "error_estimate": self.error_estimate,
            "converged": self.converged,
        }


def from_entries(entries, at=(), form: str = SCORE_OUTER) -> FisherMatrix:
    """Wrap a matrix as a FisherMatrix after symmetrising and checking definiteness."""
    g = np.atleast_2d(np.asarray(entries, dtype=float))
    if g.shape[0] != g.shape[1]:
        raise DimensionError(f"metric must be square, got {g.shape}")
    g = 0.5 * (g + g.T)
    _check_pd(g)
    return FisherMatrix(tuple(np.asarray(at, dtype=float).tolist()), g, form)


def _check_pd(g: np.ndarray):
    w, v = np.linalg.eigh(g)
    if not np.all(np.isfinite(w)) or w[-1] <= 0 or w[0] <= PD_RELATIVE_TOL * w[-1]:
        raise DegeneracyError(
            f"Fisher matrix is not positive definite (eigenvalues {w.tolist()}); "
            f"near-null direction {v[:, 0].tolist()}", direction=v[:, 0].tolist())


def _finish(xi, raw, err, converged, form) -> FisherMatrix:
    g = np.atleast_2d(np.asarray(raw, dtype=float))
    g = 0.5 * (g + g.T)
    _check_pd(g)
    return FisherMatrix(tuple(xi.tolist()), g, form, float(np.max(err)), bool(converged))


def fisher_matrix(family: ParametricFamily, xi, budget: Budget = DEFAULT_BUDGET) -> FisherMatrix:
    """g_ij = E[d_i l d_j l]."""
    xi = family.check_domain(xi)

    def outer(x):
        s = raw_score(family, x, xi)
        return s[:, None, :] * s[None, :, :]

    res = expect(family, xi, outer, budget)
    return _finish(xi, res.value, res.error_estimate, res.converged, SCORE_OUTER)


def fisher_matrix_hessian(family: ParametricFamily, xi, budget: Budget = DEFAULT_BUDGET) -> FisherMatrix:
    """g_ij = -E[d_i d_j l], second derivatives by central differences of the score."""
    xi = family.check_domain(xi)
    res = expect(family, xi, lambda x: -raw_hessian(family, x, xi), budget)
    return _finish(xi, res.value, res.error_estimate, res.converged, NEG_HESSIAN)


def inner_product(g: FisherMatrix, X, Y) -> float:
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if X.shape != (g.dim,) or Y.shape != (g.dim,):
        raise DimensionError(f"tangent vectors must have length {g.dim}, got {X.shape} and {Y.shape}")
    return float(X @ g.entries @ Y)


def inverse_metric(g: FisherMatrix) -> np.ndarray:
    """g^{ij} via Cholesky; raises if the product with g strays from I by > 1e-10."""
    G = g.entries if isinstance(g, FisherMatrix) else np.atleast_2d(np.asarray(g, dtype=float))
    try:
        L = np.linalg.cholesky(G)
    except np.linalg.LinAlgError as exc:
        raise DegeneracyError("metric is not positive definite") from exc
    eye = np.eye(G.shape[0])
    Linv = np.linalg.solve(L, eye)
    inv = Linv.T @ Linv
    inv = 0.5 * (inv + inv.T)
    resid = np.max(np.abs(G @ inv - eye))
    if not resid <= 1e-10:
        raise DegeneracyError(f"metric is numerically singular (|g g^-1 - I| = {resid:.3g})")
    return inv


def metric_derivative(family: ParametricFamily, xi, h=None, order: int = 4,
                      budget: Budget = DEFAULT_BUDGET) -> np.ndarray:
    """d_k g_ij by central differences over xi; array indexed [k, i, j].

    The default step is ``1e-3 * max(1, |xi_k|)`` (capped by the distance to
    the domain bounds) with the 5-point stencil.
    """
    xi = family.check_domain(xi)
    if h is None:
        h = _numdiff.domain_steps(family.domain, xi, 1e-3)
    h = np.broadcast_to(np.asarray(h, dtype=float), xi.shape)
    return _numdiff.central_derivative(
        lambda p: fisher_matrix(family, p, budget).entries, xi, h, order=order)


def require_same_point(a: tuple, b: tuple, what: str = "tensors"):
    if len(a) != len(b) or any(x != y for x, y in zip(a, b)):
        raise BasePointMismatch(f"{what} evaluated at different points: {list(a)} vs {list(b)}")
