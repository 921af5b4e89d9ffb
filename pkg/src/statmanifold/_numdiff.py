"""Central-difference step rules shared by the geometry modules."""

from __future__ import annotations

import numpy as np

_EPS = np.finfo(float).eps
CBRT_EPS = _EPS ** (1.0 / 3.0)
QUARTIC_EPS = _EPS ** 0.25


def steps(xi: np.ndarray, base: float = CBRT_EPS, lower=None, upper=None) -> np.ndarray:
    """Per-axis steps ``base * max(1, |xi_i|)``, rounded so xi +/- h is exact.

    With ``lower``/``upper`` bounds the scale is further capped by the
    distance to the nearest finite bound, so the relative step stays the
    same as a coordinate approaches the edge of its range (e.g. sigma -> 0).
    """
    xi = np.asarray(xi, dtype=float)
    scale = np.maximum(1.0, np.abs(xi))
    if lower is not None:
        with np.errstate(invalid="ignore"):
            dist = np.minimum(xi - np.asarray(lower, dtype=float), np.asarray(upper, dtype=float) - xi)
        scale = np.where(np.isfinite(dist) & (dist > 0), np.minimum(scale, dist), scale)
    h = base * scale
    return (xi + h) - xi


def domain_steps(domain, xi, base: float = CBRT_EPS) -> np.ndarray:
    """``steps`` capped by the bounds of a parameter box."""
    return steps(xi, base, domain.lower, domain.upper)


def central_derivative(fn, xi: np.ndarray, h: np.ndarray, order: int = 2) -> np.ndarray:
    """Stack of d fn / d xi_k for every axis k, leading axis = k.

    ``order=2`` is the 3-point stencil, ``order=4`` the 5-point stencil.
    """
    xi = np.asarray(xi, dtype=float)
    out = []
    for k in range(xi.size):
        e = np.zeros_like(xi)
        e[k] = h[k]
        if order == 2:
            d = (np.asarray(fn(xi + e)) - np.asarray(fn(xi - e))) / (2.0 * h[k])
        elif order == 4:
            d = (-np.asarray(fn(xi + 2 * e)) + 8.0 * np.asarray(fn(xi + e))
                 - 8.0 * np.asarray(fn(xi - e)) + np.asarray(fn(xi - 2 * e))) / (12.0 * h[k])
        else:
            raise ValueError("order must be 2 or 4")
        out.append(d)
    return np.stack(out)
