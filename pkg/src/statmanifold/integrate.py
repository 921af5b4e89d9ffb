"""Expectation engine: E_xi[f(X)] by exact summation, quadrature or Monte Carlo.

Continuous supports use globally adaptive Gauss-Kronrod (10/21 point) panels.
Infinite ends are compactified with ``x = c +/- 2 s atanh(t)``, ``t in [0, 1)``,
so the Gaussian-type tails of the built-in families decay super-polynomially
in ``t``.  Countable supports are summed in chunks until a geometric tail
bound drops below ``Budget.tail_tol``.

Integrands are vectorised: ``f(x)`` receives a 1-d array of sample points and
returns either an array of the same length or an array of shape
``(..., len(x))``; vector-valued integrands are integrated jointly and the
result has shape ``(...)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from .errors import IntegrationError
from .support import Interval, IntegerRange

EXACT_SUM = "exact_sum"
QUADRATURE = "quadrature"
MONTE_CARLO = "monte_carlo"

_EPS = np.finfo(float).eps

# Gauss-Kronrod 10/21 abscissae and weights (QUADPACK qng/qk21).
_X1 = np.array([0.973906528517171720077964012084452, 0.865063366688984510732096688423493,
                0.679409568299024406234327365114874, 0.433395394129247190799265943165784,
                0.148874338981631210884826001129720])
_W10 = np.array([0.066671344308688137593568809893332, 0.149451349150580593145776339657697,
                 0.219086362515982043995534934228163, 0.269266719309996355091226921569469,
                 0.295524224714752870173892994651338])
_X2 = np.array([0.995657163025808080735527280689003, 0.930157491355708226001207180059508,
                0.780817726586416897063717578345042, 0.562757134668604683339000099272694,
                0.294392862701460198131126603103866])
_W21A = np.array([0.032558162307964727478818972459390, 0.075039674810919952767043140916190,
                  0.109387158802297641899210590325805, 0.134709217311473325928054001771707,
                  0.147739104901338491374841515972068])
_W21B = np.array([0.011694638867371874278064396062192, 0.054755896574351996031381300244580,
                  0.093125454583697605535065465083366, 0.123491976262065851077958109831074,
                  0.142775938577060080797094273138717])
_W21C = 0.149445554002916905664936468389821

_POS_NODES = np.concatenate([_X1, _X2])
_POS_WK = np.concatenate([_W21A, _W21B])
_POS_WG = np.concatenate([_W10, np.zeros(5)])
_order = np.argsort(_POS_NODES)
_NODES = np.concatenate([-_POS_NODES[_order][::-1], [0.0], _POS_NODES[_order]])
_WK = np.concatenate([_POS_WK[_order][::-1], [_W21C], _POS_WK[_order]])
_WG = np.concatenate([_POS_WG[_order][::-1], [0.0], _POS_WG[_order]])
_NODES_PER_PANEL = 21

# piece kinds for the coordinate map t -> x
_FINITE, _RIGHT, _LEFT = 0, 1, 2


@dataclass(frozen=True)
class Budget:
    """Accuracy/effort knobs of the expectation engine."""

    tol: float = 1e-10
    abs_tol: float = 1e-15
    max_evals: int = 400_000
    mc_samples: int = 1_000_000
    seed: int = 0
    tail_tol: float = 1e-13

    def doubled(self) -> "Budget":
        return replace(self, max_evals=2 * self.max_evals, mc_samples=2 * self.mc_samples)


DEFAULT_BUDGET = Budget()


@dataclass(frozen=True)
class ExpectationResult:
    value: float | np.ndarray
    error_estimate: float | np.ndarray
    method: str
    evaluations: int
    converged: bool = True


def _as_2d(values: np.ndarray, npts: int):
    values = np.asarray(values, dtype=float)
    if values.ndim == 0:
        values = np.broadcast_to(values, (npts,))
    out_shape = values.shape[:-1]
    return values.reshape(-1, npts), out_shape


def _evaluate(f, logw, x, shift):
    """Return (f*w as rows, out_shape) at x; NaN where w > 0 is an error."""
    with np.errstate(all="ignore"):
        lw = np.asarray(logw(x), dtype=float) - shift
        w = np.exp(lw)
        vals, shape = _as_2d(f(x), x.size)
    w = np.where(np.isnan(w), 0.0, w)
    live = w > 0
    bad = ~np.isfinite(vals) & live
    if bad.any():
        col = int(np.argmax(bad.any(axis=0)))
        raise IntegrationError(f"integrand is not finite at x={float(x[col])!r}", x=float(x[col]))
    with np.errstate(invalid="ignore", over="ignore"):
        prod = np.where(live, vals * w, 0.0)
    return prod, shape


# ---------------------------------------------------------------------------
# adaptive quadrature


def _pieces(lo: float, hi: float, center: float, scale: float):
    """Split (lo, hi) into (kind, a, b) pieces in t-coordinates."""
    fin_lo, fin_hi = math.isfinite(lo), math.isfinite(hi)
    if fin_lo and fin_hi:
        return [(_FINITE, lo, hi)], center, scale
    c = center
    if fin_lo:
        c = max(c, lo)
    if fin_hi:
        c = min(c, hi)
    out = []
    if fin_lo and c > lo:
        out.append((_FINITE, lo, c))
    if not fin_lo:
        out.append((_LEFT, 0.0, 1.0))
    if not fin_hi:
        out.append((_RIGHT, 0.0, 1.0))
    if fin_hi and c < hi:
        out.append((_FINITE, c, hi))
    return out, c, scale


def _initial_panels(pieces):
    kinds, a, b = [], [], []
    for kind, lo, hi in pieces:
        if kind == _FINITE:
            edges = np.linspace(lo, hi, 5)
        else:
            edges = np.array([0.0, 0.4, 0.7, 0.88, 0.96, 1.0])
        kinds += [kind] * (len(edges) - 1)
        a += list(edges[:-1])
        b += list(edges[1:])
    return np.array(kinds), np.array(a, dtype=float), np.array(b, dtype=float)


def _map(kind, t, c, s):
    with np.errstate(divide="ignore"):
        arg = np.where(kind == _FINITE, 0.0, t)
        at = np.arctanh(arg)
        jac_inf = 2.0 * s / (1.0 - arg * arg)
    x = np.where(kind == _FINITE, t,
                 np.where(kind == _RIGHT, c + 2.0 * s * at, c - 2.0 * s * at))
    jac = np.where(kind == _FINITE, 1.0, jac_inf)
    return x, jac


def _gk_panels(f, logw, kinds, a, b, c, s, shift):
    half = 0.5 * (b - a)
    mid = 0.5 * (b + a)
    t = mid[:, None] + half[:, None] * _NODES[None, :]
    kk = np.broadcast_to(kinds[:, None], t.shape)
    x, jac = _map(kk, t, c, s)
    prod, shape = _evaluate(f, logw, x.ravel(), shift)
    with np.errstate(invalid="ignore", over="ignore"):
        g = prod.reshape(prod.shape[0], *t.shape) * jac[None]
    # g: (C, P, 21)
    res_k = np.einsum("cpn,n->cp", g, _WK) * half
    res_g = np.einsum("cpn,n->cp", g, _WG) * half
    res_abs = np.einsum("cpn,n->cp", np.abs(g), _WK) * np.abs(half)
    mean = res_k / np.where(half == 0, 1.0, half) * 0.5
    res_asc = np.einsum("cpn,n->cp", np.abs(g - mean[..., None]), _WK) * np.abs(half)
    err = np.abs(res_k - res_g)
    with np.errstate(divide="ignore", invalid="ignore"):
        scaled = res_asc * np.minimum(1.0, (200.0 * err / res_asc) ** 1.5)
    err = np.where((res_asc > 0) & (err > 0), scaled, err)
    err = np.maximum(err, 50.0 * _EPS * res_abs)
    return res_k, err, res_abs, shape


def _quadrature(f, logw, lo, hi, center, scale, budget: Budget, log_shift: bool):
    pieces, c, s = _pieces(lo, hi, center, scale)
    kinds, a, b = _initial_panels(pieces)
    shift = 0.0
    if log_shift:
        half, mid = 0.5 * (b - a), 0.5 * (b + a)
        t = (mid[:, None] + half[:, None] * _NODES[None, :]).ravel()
        x, _ = _map(np.repeat(kinds, 21), t, c, s)
        with np.errstate(all="ignore"):
            lw = np.asarray(logw(x), dtype=float)
        finite = lw[np.isfinite(lw)]
        shift = float(finite.max()) if finite.size else 0.0
    val, err, rabs, shape = _gk_panels(f, logw, kinds, a, b, c, s, shift)
    evals = a.size * _NODES_PER_PANEL
    converged = False
    while True:
        total = val.sum(axis=1)
        total_err = err.sum(axis=1)
        total_abs = rabs.sum(axis=1)
        tol = np.maximum(budget.abs_tol, budget.tol * total_abs)
        if np.all(total_err <= tol):
            converged = True
            break
        if evals >= budget.max_evals:
            break
        badness = (err / tol[:, None]).max(axis=0)
        # panels that can no longer be bisected are frozen
        splittable = (b - a) > 64 * _EPS * np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))
        order = np.argsort(-np.where(splittable, badness, -1.0))
        cum = np.cumsum(badness[order])
        remaining = badness.sum() - cum
        n_split = int(np.searchsorted(-remaining, -0.5) + 1)
        chosen = order[:n_split]
        chosen = chosen[splittable[chosen]]
        if chosen.size == 0:
            break
        keep = np.ones(a.size, dtype=bool)
        keep[chosen] = False
        ca, cb, ck = a[chosen], b[chosen], kinds[chosen]
        cm = 0.5 * (ca + cb)
        na = np.concatenate([ca, cm])
        nb = np.concatenate([cm, cb])
        nk = np.concatenate([ck, ck])
        nval, nerr, nabs, _ = _gk_panels(f, logw, nk, na, nb, c, s, shift)
        evals += na.size * _NODES_PER_PANEL
        a = np.concatenate([a[keep], na])
        b = np.concatenate([b[keep], nb])
        kinds = np.concatenate([kinds[keep], nk])
        val = np.concatenate([val[:, keep], nval], axis=1)
        err = np.concatenate([err[:, keep], nerr], axis=1)
        rabs = np.concatenate([rabs[:, keep], nabs], axis=1)
    # sum panels in a fixed (position-sorted) order for reproducibility
    key = np.lexsort((a, kinds))
    total = val[:, key].sum(axis=1)
    total_err = err[:, key].sum(axis=1)
    return total.reshape(shape), total_err.reshape(shape), evals, converged, shift


# ---------------------------------------------------------------------------
# exact summation


def _exact_sum(f, logw, support: IntegerRange, budget: Budget, log_shift: bool, start: float | None = None):
    shift = 0.0
    if support.finite and support.hi - support.lo < budget.max_evals:
        x = np.arange(support.lo, support.hi + 1, dtype=float)
        if log_shift:
            with np.errstate(all="ignore"):
                lw = np.asarray(logw(x), dtype=float)
            shift = float(lw[np.isfinite(lw)].max()) if np.isfinite(lw).any() else 0.0
        prod, shape = _evaluate(f, logw, x, shift)
        value = prod.sum(axis=1)
        err = 4 * _EPS * np.abs(prod).sum(axis=1) * math.sqrt(x.size)
        return value.reshape(shape), err.reshape(shape), x.size, True, shift

    chunk = 128
    lo = support.lo
    parts = []
    mass_parts = []
    evals = 0
    converged = False
    tail = None
    shape = None
    while evals < budget.max_evals:
        hi_chunk = lo + chunk - 1
        if support.hi is not None:
            hi_chunk = min(hi_chunk, support.hi)
        x = np.arange(lo, hi_chunk + 1, dtype=float)
        if log_shift and evals == 0:
            with np.errstate(all="ignore"):
                lw = np.asarray(logw(x), dtype=float)
            shift = float(lw[np.isfinite(lw)].max()) if np.isfinite(lw).any() else 0.0
        prod, shape = _evaluate(f, logw, x, shift)
        with np.errstate(all="ignore"):
            mass = np.exp(np.asarray(logw(x), dtype=float) - shift)
        parts.append(prod)
        mass_parts.append(np.nan_to_num(mass))
        evals += x.size
        if support.hi is not None and hi_chunk >= support.hi:
            converged = True
            tail = np.zeros(prod.shape[0])
            break
        # geometric tail bound from the last few terms, once both the mass
        # and the integrand magnitude are decreasing
        mag = np.abs(prod).max(axis=0)
        mag = np.maximum(mag, mass_parts[-1])
        last = mag[-8:]
        if last[-1] == 0.0 and np.all(last == 0.0):
            tail = np.zeros(prod.shape[0])
            converged = True
            break
        with np.errstate(divide="ignore", invalid="ignore"):
            ratios = last[1:] / last[:-1]
        r = float(np.nanmax(ratios)) if np.isfinite(ratios).any() else 1.0
        if np.all(np.diff(last) <= 0) and r < 1.0:
            bound = last[-1] * r / (1.0 - r)
            if bound < budget.tail_tol:
                tail = np.full(prod.shape[0], bound)
                converged = True
                break
        lo = hi_chunk + 1
        chunk = min(2 * chunk, 1 << 16)
    allp = np.concatenate(parts, axis=1)
    value = allp.sum(axis=1)
    err = 4 * _EPS * np.abs(allp).sum(axis=1) * math.sqrt(allp.shape[1])
    if tail is not None:
        err = err + tail
    else:
        err = err + np.abs(parts[-1]).sum(axis=1)
    return value.reshape(shape), err.reshape(shape), evals, converged, shift


# ---------------------------------------------------------------------------
# Monte Carlo


def monte_carlo(f, sampler: Callable, budget: Budget) -> ExpectationResult:
    """Sample mean of f over ``budget.mc_samples`` draws from ``sampler(rng, count)``."""
    rng = np.random.default_rng(budget.seed)
    n_total = budget.mc_samples
    chunk = 1 << 17
    s1 = None
    s2 = None
    done = 0
    shape = None
    while done < n_total:
        m = min(chunk, n_total - done)
        x = np.asarray(sampler(rng, m), dtype=float)
        vals, shape = _as_2d(f(x), x.size)
        if not np.all(np.isfinite(vals)):
            col = int(np.argmax(~np.isfinite(vals).all(axis=0)))
            raise IntegrationError(f"integrand is not finite at x={float(x[col])!r}", x=float(x[col]))
        if s1 is None:
            s1 = np.zeros(vals.shape[0])
            s2 = np.zeros(vals.shape[0])
        s1 += vals.sum(axis=1)
        s2 += (vals * vals).sum(axis=1)
        done += m
    mean = s1 / n_total
    var = np.maximum(s2 / n_total - mean * mean, 0.0) * n_total / max(n_total - 1, 1)
    se = np.sqrt(var / n_total)
    value, err = mean.reshape(shape), se.reshape(shape)
    if shape == ():
        value, err = float(value), float(err)
    return ExpectationResult(value, err, MONTE_CARLO, n_total, True)


# ---------------------------------------------------------------------------
# public entry points


def integrate_weighted(f, logw, support, *, budget: Budget = DEFAULT_BUDGET,
                       center: float = 0.0, scale: float = 1.0, log_shift: bool = False):
    """Integrate ``f(x) exp(logw(x))`` over ``support``.

    Returns ``(value, error, evaluations, converged, shift)``; with
    ``log_shift`` the weight is divided by ``exp(shift)`` before integration
    (``shift`` is the largest log weight seen on the initial nodes), which
    keeps unnormalised weights from overflowing.
    """
    if isinstance(support, IntegerRange):
        out = _exact_sum(f, logw, support, budget, log_shift)
    elif isinstance(support, Interval):
        out = _quadrature(f, logw, support.lo, support.hi, center, scale, budget, log_shift)
    else:
        raise TypeError(f"cannot integrate over {support!r}")
    value, err, evals, converged, shift = out
    if np.ndim(value) == 0:
        value, err = float(value), float(err)
    return value, err, evals, converged, shift


def expect(family, xi, f, budget: Budget | None = None, method: str | None = None) -> ExpectationResult:
    """E_xi[f(X)] for a family at parameter ``xi``.

    The method follows the support: finite/countable integer supports are
    summed exactly, declared intervals use adaptive quadrature, anything else
    falls back to Monte Carlo with the family sampler.  ``method`` forces a
    choice (e.g. ``"monte_carlo"`` for cross-checks).
    """
    budget = budget or DEFAULT_BUDGET
    xi = family.check_domain(xi)
    support = family.support
    if method is None:
        if isinstance(support, IntegerRange):
            method = EXACT_SUM
        elif isinstance(support, Interval):
            method = QUADRATURE
        else:
            method = MONTE_CARLO
    if method == MONTE_CARLO:
        return monte_carlo(f, lambda rng, m: family.sampler(xi, rng, m), budget)

    def logw(x):
        return family.log_density(x, xi)

    center, scale = family.scale_hint(xi) if family.scale_hint else (0.0, 1.0)
    if method == EXACT_SUM and not isinstance(support, IntegerRange):
        raise ValueError("exact summation needs an integer support")
    if method == QUADRATURE and not isinstance(support, Interval):
        raise ValueError("quadrature needs an interval support")
    value, err, evals, converged, _ = integrate_weighted(
        f, logw, support, budget=budget, center=center, scale=scale)
    return ExpectationResult(value, err, method, evals, converged)
