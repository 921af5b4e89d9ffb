"""Parametric families: the statistical manifold S = {p(x; xi)}.

A :class:`ParametricFamily` bundles a vectorised log-density, an optional
analytic score, a sampler, the sample-space support and an open parameter
box.  Built-in families are plain constructors; custom exponential and
mixture families are assembled from a carrier ``K(x)`` and statistics
``F_i(x)``.

All callables stored on a family are *raw*: they accept arrays of sample
points, do no validation, and return ``-inf`` off the support.  The
module-level functions (:func:`log_density`, :func:`score`, ...) are the
checked public surface.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import gammaln
from scipy.stats import qmc

from . import _numdiff
from .errors import DomainError, FamilyConstructionError, StatManifoldError, SupportError
from .integrate import DEFAULT_BUDGET, Budget, expect, integrate_weighted
from .support import IntegerRange, Interval

DOMAIN_MARGIN = 1e-6
SUPPORT_GRID_SIZE = 256
_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


# ---------------------------------------------------------------------------
# parameter domain


@dataclass(frozen=True)
class Box:
    """Open parameter box, optionally cut further by a predicate.

    A point is admissible when every coordinate lies strictly inside
    ``(lower + margin, upper - margin)`` and the predicate holds.
    """

    lower: tuple
    upper: tuple
    margin: float = DOMAIN_MARGIN
    predicate: Optional[Callable[[np.ndarray], bool]] = None
    predicate_text: str = ""
    reference: Optional[tuple] = None

    def __post_init__(self):
        if len(self.lower) != len(self.upper):
            raise FamilyConstructionError("domain bounds have different lengths")
        for lo, hi in zip(self.lower, self.upper):
            if not lo < hi:
                raise FamilyConstructionError(f"empty domain interval ({lo}, {hi})")

    @property
    def dim(self) -> int:
        return len(self.lower)

    @property
    def bounded(self) -> bool:
        return all(math.isfinite(v) for v in self.lower + self.upper)

    def violation(self, xi: np.ndarray) -> str | None:
        if xi.shape != (self.dim,):
            return f"expected a {self.dim}-vector, got shape {xi.shape}"
        if not np.all(np.isfinite(xi)):
            return "parameter vector is not finite"
        for i, (v, lo, hi) in enumerate(zip(xi, self.lower, self.upper)):
            if not (lo + self.margin < v < hi - self.margin):
                return (f"coordinate {i} = {float(v)!r} outside open interval "
                        f"({lo}, {hi}) with margin {self.margin}")
        if self.predicate is not None and not self.predicate(xi):
            return f"constraint {self.predicate_text or 'predicate'} violated at {xi.tolist()}"
        return None

    def contains(self, xi) -> bool:
        return self.violation(np.asarray(xi, dtype=float)) is None

    def contains_rows(self, X) -> np.ndarray:
        """Vectorised ``contains`` over the rows of an ``(m, dim)`` array."""
        X = np.asarray(X, dtype=float).reshape(-1, self.dim)
        lo = np.asarray(self.lower, dtype=float) + self.margin
        hi = np.asarray(self.upper, dtype=float) - self.margin
        with np.errstate(invalid="ignore"):
            ok = np.all(np.isfinite(X) & (X > lo) & (X < hi), axis=1)
        if self.predicate is not None:
            for r in np.nonzero(ok)[0]:
                ok[r] = bool(self.predicate(X[r]))
        return ok

    def check(self, xi) -> np.ndarray:
        xi = np.atleast_1d(np.asarray(xi, dtype=float))
        msg = self.violation(xi)
        if msg is not None:
            raise DomainError(msg)
        return xi

    def center(self) -> np.ndarray:
        if self.reference is not None:
            return np.asarray(self.reference, dtype=float)
        out = []
        for lo, hi in zip(self.lower, self.upper):
            if math.isfinite(lo) and math.isfinite(hi):
                out.append(0.5 * (lo + hi))
            elif math.isfinite(lo):
                out.append(lo + 1.0)
            elif math.isfinite(hi):
                out.append(hi - 1.0)
            else:
                out.append(0.0)
        return np.asarray(out)

    def corners(self) -> np.ndarray:
        """Corner points pulled inside by twice the margin (bounded boxes only)."""
        lo = np.asarray(self.lower) + 2 * self.margin
        hi = np.asarray(self.upper) - 2 * self.margin
        grids = np.meshgrid(*[[a, b] for a, b in zip(lo, hi)], indexing="ij")
        return np.stack([g.ravel() for g in grids], axis=1)

    def grid(self, points_per_axis: int, shrink: float = 0.1) -> np.ndarray:
        """Tensor grid over the box; infinite sides are replaced by center +/- 2."""
        c = self.center()
        axes = []
        for i, (lo, hi) in enumerate(zip(self.lower, self.upper)):
            a = lo if math.isfinite(lo) else c[i] - 2.0
            b = hi if math.isfinite(hi) else c[i] + 2.0
            pad = shrink * (b - a)
            axes.append(np.linspace(a + pad, b - pad, points_per_axis))
        mesh = np.meshgrid(*axes, indexing="ij")
        pts = np.stack([m.ravel() for m in mesh], axis=1)
        return np.array([p for p in pts if self.contains(p)])

    def to_json(self) -> list:
        return [[_enc(lo), _enc(hi)] for lo, hi in zip(self.lower, self.upper)]


def _enc(v: float):
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return v


def box(bounds: Sequence[Sequence[float]], **kwargs) -> Box:
    lower = tuple(float(b[0]) for b in bounds)
    upper = tuple(float(b[1]) for b in bounds)
    return Box(lower, upper, **kwargs)


# ---------------------------------------------------------------------------
# families


@dataclass(frozen=True)
class ExponentialStructure:
    """Carrier, statistics and log-partition of an exponential family.

    ``statistics(x)`` returns an ``(n, len(x))`` array.  ``psi``,
    ``psi_grad`` and ``psi_hess`` take a parameter vector; when
    ``closed_form`` is true they also broadcast over a leading batch axis
    (``theta`` of shape ``(..., n)``), which the curved-model MLE relies on.
    """

    carrier: Callable
    statistics: Callable
    psi: Callable
    psi_grad: Callable
    psi_hess: Callable
    closed_form: bool = False


@dataclass(frozen=True)
class ParametricFamily:
    name: str
    dim: int
    domain: Box
    support: object
    log_density: Callable
    sampler: Callable
    score: Optional[Callable] = None
    hessian: Optional[Callable] = None
    scale_hint: Optional[Callable] = None
    param_names: tuple = ()
    kind: str = "generic"
    exponential: Optional[ExponentialStructure] = None
    spec: dict = field(default_factory=dict, compare=False)

    def check_domain(self, xi) -> np.ndarray:
        return self.domain.check(xi)


@dataclass(frozen=True)
class ExponentialFamilySpec:
    carrier: Callable
    statistics: Sequence[Callable]
    support: object
    center: float = 0.0
    scale: float = 1.0
    name: str = "exponential_family"


@dataclass(frozen=True)
class MixtureFamilySpec:
    carrier: Callable
    statistics: Sequence[Callable]
    support: object
    name: str = "mixture_family"


# ---------------------------------------------------------------------------
# checked public operations


def _points(x):
    arr = np.asarray(x, dtype=float)
    return np.atleast_1d(arr).ravel(), arr.ndim == 0


def _check_support(family: ParametricFamily, x: np.ndarray):
    ok = family.support.contains(x)
    if not np.all(ok):
        bad = x[~ok][0]
        raise SupportError(f"x={float(bad)!r} is outside the support of {family.name}")


def log_density(family: ParametricFamily, x, xi):
    """log p(x; xi), with domain and support checks."""
    xi = family.check_domain(xi)
    pts, scalar = _points(x)
    _check_support(family, pts)
    out = np.asarray(family.log_density(pts, xi), dtype=float)
    return float(out[0]) if scalar else out


def density(family: ParametricFamily, x, xi):
    return np.exp(log_density(family, x, xi))


def raw_score(family: ParametricFamily, x: np.ndarray, xi: np.ndarray) -> np.ndarray:
    """Score array ``(n, len(x))`` without checks; finite differences if no analytic score."""
    if family.score is not None:
        return np.asarray(family.score(x, xi), dtype=float).reshape(family.dim, x.size)
    h = _numdiff.domain_steps(family.domain, xi)
    return _numdiff.central_derivative(lambda p: family.log_density(x, p), xi, h)


def raw_hessian(family: ParametricFamily, x: np.ndarray, xi: np.ndarray) -> np.ndarray:
    """Second derivatives of log p, shape ``(n, n, len(x))``, unsymmetrised.

    Entry ``[i, j]`` differentiates the i-th score component along axis j.
    """
    n = family.dim
    if family.hessian is not None:
        return np.asarray(family.hessian(x, xi), dtype=float).reshape(n, n, x.size)
    if family.score is not None:
        h = _numdiff.domain_steps(family.domain, xi)
        d = _numdiff.central_derivative(lambda p: raw_score(family, x, p), xi, h)
        # d[j, i, :] = d s_i / d xi_j
        return np.transpose(d, (1, 0, 2))
    h = _numdiff.domain_steps(family.domain, xi, _numdiff.QUARTIC_EPS)
    out = np.empty((n, n, x.size))
    l0 = family.log_density(x, xi)
    for i in range(n):
        ei = np.zeros(n)
        ei[i] = h[i]
        out[i, i] = (family.log_density(x, xi + ei) - 2.0 * l0 + family.log_density(x, xi - ei)) / h[i] ** 2
        for j in range(i + 1, n):
            ej = np.zeros(n)
            ej[j] = h[j]
            v = (family.log_density(x, xi + ei + ej) - family.log_density(x, xi + ei - ej)
                 - family.log_density(x, xi - ei + ej) + family.log_density(x, xi - ei - ej))
            out[i, j] = out[j, i] = v / (4.0 * h[i] * h[j])
    return out


def score(family: ParametricFamily, x, xi):
    """Gradient of log p(x; xi) in xi: shape ``(n,)`` for scalar x, else ``(n, len(x))``."""
    xi = family.check_domain(xi)
    pts, scalar = _points(x)
    _check_support(family, pts)
    out = raw_score(family, pts, xi)
    return out[:, 0] if scalar else out


def fd_score(family: ParametricFamily, x, xi):
    """Central-difference score, ignoring any analytic score."""
    xi = family.check_domain(xi)
    pts, scalar = _points(x)
    _check_support(family, pts)
    h = _numdiff.domain_steps(family.domain, xi)
    out = _numdiff.central_derivative(lambda p: family.log_density(pts, p), xi, h)
    return out[:, 0] if scalar else out


def hessian_log_density(family: ParametricFamily, x, xi):
    xi = family.check_domain(xi)
    pts, scalar = _points(x)
    _check_support(family, pts)
    out = raw_hessian(family, pts, xi)
    return out[:, :, 0] if scalar else out


def sample(family: ParametricFamily, xi, seed: int, count: int) -> np.ndarray:
    xi = family.check_domain(xi)
    rng = np.random.default_rng(seed)
    return np.asarray(family.sampler(xi, rng, count), dtype=float)


# ---------------------------------------------------------------------------
# generic helpers


def support_grid(support, center: float = 0.0, scale: float = 1.0,
                 size: int = SUPPORT_GRID_SIZE) -> np.ndarray:
    """Fixed quasi-random grid of sample points covering the support."""
    if isinstance(support, IntegerRange):
        if support.finite and support.hi - support.lo + 1 <= size:
            return np.arange(support.lo, support.hi + 1, dtype=float)
        top = support.lo + size - 1 if not support.finite else support.hi
        return np.unique(np.round(np.linspace(support.lo, top, size)))
    u = qmc.Halton(d=1, scramble=False).random(size + 1)[1:, 0]
    lo, hi = support.lo, support.hi
    if math.isfinite(lo) and math.isfinite(hi):
        return lo + (hi - lo) * u
    if math.isfinite(lo):
        return lo + 2.0 * scale * np.arctanh(u)
    if math.isfinite(hi):
        return hi - 2.0 * scale * np.arctanh(u)
    return center + 2.0 * scale * np.arctanh(2.0 * u - 1.0)


def tabulated_sampler(logpdf: Callable, support, hint: Optional[Callable] = None,
                      grid_size: int = 16385) -> Callable:
    """Inverse-CDF sampler built from the log-density on a fine grid.

    Discrete supports enumerate the mass function until 1 - 1e-14 of the
    mass is covered; continuous supports interpolate a trapezoidal CDF.
    """

    def sampler(xi, rng, count):
        u = rng.random(count)
        if isinstance(support, IntegerRange):
            if support.finite:
                xs = np.arange(support.lo, support.hi + 1, dtype=float)
                pm = np.exp(logpdf(xs, xi))
            else:
                chunks, masses = [], []
                lo = support.lo
                total = 0.0
                while total < 1.0 - 1e-14 and lo < support.lo + 10**7:
                    xs = np.arange(lo, lo + 4096, dtype=float)
                    m = np.exp(logpdf(xs, xi))
                    chunks.append(xs)
                    masses.append(m)
                    total += m.sum()
                    lo += 4096
                xs, pm = np.concatenate(chunks), np.concatenate(masses)
            cdf = np.cumsum(pm)
            cdf /= cdf[-1]
            return xs[np.minimum(np.searchsorted(cdf, u, side="right"), xs.size - 1)]
        c, s = hint(xi) if hint else (0.0, 1.0)
        lo, hi = support.lo, support.hi
        t = np.linspace(0.0, 1.0, grid_size)[1:-1]
        if math.isfinite(lo) and math.isfinite(hi):
            xs = np.linspace(lo, hi, grid_size)
        elif math.isfinite(lo):
            xs = np.concatenate([[lo], lo + 2.0 * s * np.arctanh(t) * 4.0])
        elif math.isfinite(hi):
            xs = np.concatenate([hi - 2.0 * s * np.arctanh(t[::-1]) * 4.0, [hi]])
        else:
            xs = c + 8.0 * s * np.arctanh(2.0 * t - 1.0)
        with np.errstate(all="ignore"):
            pdf = np.nan_to_num(np.exp(logpdf(xs, xi)))
        cdf = np.concatenate([[0.0], np.cumsum(0.5 * (pdf[1:] + pdf[:-1]) * np.diff(xs))])
        cdf /= cdf[-1]
        return np.interp(u, cdf, xs)

    return sampler


def _stack_statistics(stats: Sequence[Callable]) -> Callable:
    def F(x):
        x = np.asarray(x, dtype=float)
        return np.stack([np.broadcast_to(np.asarray(f(x), dtype=float), x.shape) for f in stats])
    return F


def _check_independent(stats_fn: Callable, support, center, scale, what: str):
    grid = support_grid(support, center, scale)
    with np.errstate(all="ignore"):
        M = np.vstack([np.ones_like(grid), stats_fn(grid)])
    M = M[:, np.all(np.isfinite(M), axis=0)]
    sv = np.linalg.svd(M / np.maximum(np.abs(M).max(axis=1, keepdims=True), 1e-300), compute_uv=False)
    rank = int(np.sum(sv > 1e-10 * sv[0]))
    if rank < M.shape[0]:
        raise FamilyConstructionError(
            f"{what}: statistics together with the constant function have rank {rank} "
            f"< {M.shape[0]} on the support grid (they must be linearly independent and "
            "not constant)")


# ---------------------------------------------------------------------------
# constructors


def make_exponential_family(spec: ExponentialFamilySpec, domain: Box,
                            budget: Budget = DEFAULT_BUDGET) -> ParametricFamily:
    """Family p(x; xi) = exp{K(x) + sum_i xi^i F_i(x) - psi(xi)}.

    psi, its gradient (E[F]) and Hessian (Cov[F]) are computed by quadrature
    or exact summation and cached per parameter vector.
    """
    n = len(spec.statistics)
    if n != domain.dim:
        raise FamilyConstructionError(f"{n} statistics but a {domain.dim}-dimensional domain")
    K = spec.carrier
    F = _stack_statistics(spec.statistics)
    support = spec.support
    _check_independent(F, support, spec.center, spec.scale, spec.name)

    def carrier(x):
        return np.broadcast_to(np.asarray(K(x), dtype=float), np.shape(x))

    def natural_logw(theta):
        def lw(x):
            return carrier(x) + theta @ F(x)
        return lw

    @functools.lru_cache(maxsize=4096)
    def _moments(key: tuple):
        theta = np.asarray(key)
        lw = natural_logw(theta)
        zero, zerr, _, conv, shift = integrate_weighted(
            lambda x: np.vstack([np.ones_like(x), F(x)]), lw, support, budget=budget,
            center=spec.center, scale=spec.scale, log_shift=True)
        if not conv or not np.all(np.isfinite(zero)) or zero[0] <= 0:
            raise FamilyConstructionError(
                f"normalization integral of {spec.name} diverges or failed at xi={list(key)}",
                xi=list(key))
        psi = shift + math.log(zero[0])
        mean = zero[1:] / zero[0]

        def centered(x):
            d = F(x) - mean[:, None]
            return d[:, None, :] * d[None, :, :]

        cov, _, _, conv2, _ = integrate_weighted(
            centered, lambda x: lw(x) - psi, support, budget=budget,
            center=spec.center, scale=spec.scale)
        cov = np.atleast_2d(cov)
        return psi, mean, 0.5 * (cov + cov.T)

    def psi(theta):
        return _moments(tuple(np.asarray(theta, dtype=float).tolist()))[0]

    def psi_grad(theta):
        return _moments(tuple(np.asarray(theta, dtype=float).tolist()))[1].copy()

    def psi_hess(theta):
        return _moments(tuple(np.asarray(theta, dtype=float).tolist()))[2].copy()

    def logpdf(x, theta):
        return natural_logw(theta)(x) - psi(theta)

    def score_fn(x, theta):
        return F(x) - psi_grad(theta)[:, None]

    def hess_fn(x, theta):
        return np.broadcast_to(-psi_hess(theta)[:, :, None], (n, n, np.size(x)))

    # normalization must converge at a few interior probe points
    probes = [domain.center()]
    if domain.bounded:
        c = domain.center()
        probes += [c + 0.9 * (corner - c) for corner in domain.corners()]
    for p in probes:
        if domain.contains(p):
            psi(p)

    hint = (lambda theta: (spec.center, spec.scale))
    return ParametricFamily(
        name=spec.name, dim=n, domain=domain, support=support, log_density=logpdf,
        sampler=tabulated_sampler(logpdf, support, hint), score=score_fn, hessian=hess_fn,
        scale_hint=hint, param_names=tuple(f"theta{i + 1}" for i in range(n)),
        kind="exponential",
        exponential=ExponentialStructure(carrier, F, psi, psi_grad, psi_hess, closed_form=False),
    )


def make_mixture_family(spec: MixtureFamilySpec, domain: Box,
                        budget: Budget = DEFAULT_BUDGET, norm_tol: float = 1e-8) -> ParametricFamily:
    """Family p(x; xi) = K(x) + sum_i xi^i F_i(x) over a bounded box."""
    n = len(spec.statistics)
    if n != domain.dim:
        raise FamilyConstructionError(f"{n} statistics but a {domain.dim}-dimensional domain")
    if not domain.bounded:
        raise FamilyConstructionError("a mixture family needs a bounded parameter box")
    support = spec.support
    K = spec.carrier
    F = _stack_statistics(spec.statistics)
    _check_independent(F, support, 0.0, 1.0, spec.name)

    def carrier(x):
        return np.broadcast_to(np.asarray(K(x), dtype=float), np.shape(x))

    masses, _, _, conv, _ = integrate_weighted(
        lambda x: np.vstack([carrier(x), F(x)]), lambda x: np.zeros_like(x), support, budget=budget)
    if not conv:
        raise FamilyConstructionError(f"{spec.name}: integrals of carrier/statistics did not converge")
    if abs(masses[0] - 1.0) > norm_tol:
        raise FamilyConstructionError(f"{spec.name}: carrier integrates to {masses[0]!r}, not 1")
    for i, m in enumerate(masses[1:]):
        if abs(m) > norm_tol:
            raise FamilyConstructionError(f"{spec.name}: statistic {i + 1} integrates to {m!r}, not 0")

    # p is affine in xi, so its minimum over the box is attained at a corner
    grid = _positivity_grid(support)
    Kg, Fg = carrier(grid), F(grid)
    for corner in domain.corners():
        p = Kg + corner @ Fg
        if np.any(p < 0):
            k = int(np.argmin(p))
            raise FamilyConstructionError(
                f"{spec.name}: density is negative ({p[k]:.6g}) at x={float(grid[k])!r}, "
                f"xi={corner.tolist()}", x=float(grid[k]), xi=corner.tolist())

    def logpdf(x, xi):
        with np.errstate(divide="ignore", invalid="ignore"):
            p = carrier(x) + xi @ F(x)
            return np.where(p > 0, np.log(np.where(p > 0, p, 1.0)), -np.inf)

    def score_fn(x, xi):
        Fx = F(x)
        p = carrier(x) + xi @ Fx
        return Fx / p

    return ParametricFamily(
        name=spec.name, dim=n, domain=domain, support=support, log_density=logpdf,
        sampler=tabulated_sampler(logpdf, support), score=score_fn,
        param_names=tuple(f"xi{i + 1}" for i in range(n)), kind="mixture",
    )


def _positivity_grid(support) -> np.ndarray:
    if isinstance(support, IntegerRange):
        return support_grid(support, size=4096)
    lo, hi = support.lo, support.hi
    g = support_grid(support, size=4096)
    ends = [v for v in (lo, hi) if math.isfinite(v)]
    if math.isfinite(lo) and math.isfinite(hi):
        g = np.concatenate([np.linspace(lo, hi, 4097), g])
    return np.sort(np.concatenate([g, ends]))


# ---------------------------------------------------------------------------
# built-in families


def gaussian() -> ParametricFamily:
    """Normal family in (mu, sigma)."""

    def logpdf(x, xi):
        mu, sigma = xi
        return -math.log(sigma) - _LOG_SQRT_2PI - (x - mu) ** 2 / (2.0 * sigma * sigma)

    def score_fn(x, xi):
        mu, sigma = xi
        z = x - mu
        return np.stack([z / sigma**2, -1.0 / sigma + z * z / sigma**3])

    def sampler(xi, rng, count):
        return rng.normal(xi[0], xi[1], count)

    return ParametricFamily(
        name="gaussian", dim=2, domain=box([(-math.inf, math.inf), (0.0, math.inf)]),
        support=Interval(), log_density=logpdf, sampler=sampler, score=score_fn,
        scale_hint=lambda xi: (float(xi[0]), float(xi[1])), param_names=("mu", "sigma"),
        spec={"kind": "gaussian", "dim": 2},
    )


def gaussian_known_sigma(sigma: float = 1.0) -> ParametricFamily:
    """Normal family in mu with fixed sigma (exponential in mu via F = x / sigma^2)."""
    if not sigma > 0:
        raise FamilyConstructionError("sigma must be positive")
    s2 = sigma * sigma

    def logpdf(x, xi):
        return -math.log(sigma) - _LOG_SQRT_2PI - (x - xi[0]) ** 2 / (2.0 * s2)

    def score_fn(x, xi):
        return ((x - xi[0]) / s2)[None, :]

    expo = ExponentialStructure(
        carrier=lambda x: -x * x / (2.0 * s2) - math.log(sigma) - _LOG_SQRT_2PI,
        statistics=lambda x: (np.asarray(x, dtype=float) / s2)[None, :],
        psi=lambda th: np.asarray(th)[..., 0] ** 2 / (2.0 * s2),
        psi_grad=lambda th: np.asarray(th) / s2,
        psi_hess=lambda th: np.broadcast_to(np.array([[1.0 / s2]]),
                                            np.shape(th)[:-1] + (1, 1)).copy(),
        closed_form=True,
    )
    return ParametricFamily(
        name="gaussian_known_sigma", dim=1, domain=box([(-math.inf, math.inf)]),
        support=Interval(), log_density=logpdf,
        sampler=lambda xi, rng, count: rng.normal(xi[0], sigma, count),
        score=score_fn, scale_hint=lambda xi: (float(xi[0]), sigma), param_names=("mu",),
        kind="exponential", exponential=expo,
        spec={"kind": "gaussian", "dim": 1, "sigma": sigma},
    )


def gaussian_natural() -> ParametricFamily:
    """Normal family in natural parameters (theta1, theta2), F = (x, x^2), theta2 < 0."""

    def moments(th):
        th = np.asarray(th, dtype=float)
        t1, t2 = th[..., 0], th[..., 1]
        mu = -t1 / (2.0 * t2)
        var = -1.0 / (2.0 * t2)
        return mu, var

    def psi(th):
        th = np.asarray(th, dtype=float)
        t1, t2 = th[..., 0], th[..., 1]
        return -t1 * t1 / (4.0 * t2) + 0.5 * np.log(np.pi / (-t2))

    def psi_grad(th):
        mu, var = moments(th)
        return np.stack([mu, mu * mu + var], axis=-1)

    def psi_hess(th):
        mu, var = moments(th)
        row0 = np.stack([var, 2.0 * mu * var], axis=-1)
        row1 = np.stack([2.0 * mu * var, 4.0 * mu * mu * var + 2.0 * var * var], axis=-1)
        return np.stack([row0, row1], axis=-2)

    def stats(x):
        x = np.asarray(x, dtype=float)
        return np.stack([x, x * x])

    def logpdf(x, th):
        return th[0] * x + th[1] * x * x - psi(th)

    def score_fn(x, th):
        return stats(x) - psi_grad(th)[:, None]

    def hess_fn(x, th):
        return np.broadcast_to(-psi_hess(th)[:, :, None], (2, 2, np.size(x)))

    def sampler(th, rng, count):
        mu, var = moments(th)
        return rng.normal(float(mu), math.sqrt(float(var)), count)

    def hint(th):
        mu, var = moments(th)
        return float(mu), math.sqrt(float(var))

    return ParametricFamily(
        name="gaussian_natural", dim=2, domain=box([(-math.inf, math.inf), (-math.inf, 0.0)]),
        support=Interval(), log_density=logpdf, sampler=sampler, score=score_fn,
        hessian=hess_fn, scale_hint=hint, param_names=("theta1", "theta2"), kind="exponential",
        exponential=ExponentialStructure(lambda x: np.zeros_like(np.asarray(x, dtype=float)),
                                         stats, psi, psi_grad, psi_hess, closed_form=True),
        spec={"kind": "gaussian", "dim": 2, "parametrization": "natural"},
    )


def poisson() -> ParametricFamily:
    """Poisson family in the natural parameter theta = log(rate)."""

    def logpdf(x, th):
        return x * th[0] - math.exp(th[0]) - gammaln(x + 1.0)

    def score_fn(x, th):
        return (x - math.exp(th[0]))[None, :]

    expo = ExponentialStructure(
        carrier=lambda x: -gammaln(np.asarray(x, dtype=float) + 1.0),
        statistics=lambda x: np.asarray(x, dtype=float)[None, :],
        psi=lambda th: np.exp(np.asarray(th)[..., 0]),
        psi_grad=lambda th: np.exp(np.asarray(th, dtype=float)),
        psi_hess=lambda th: np.exp(np.asarray(th, dtype=float))[..., None],
        closed_form=True,
    )
    return ParametricFamily(
        name="poisson", dim=1, domain=box([(-math.inf, math.inf)]), support=IntegerRange(0),
        log_density=logpdf, sampler=lambda th, rng, count: rng.poisson(math.exp(th[0]), count),
        score=score_fn, param_names=("theta",), kind="exponential", exponential=expo,
        spec={"kind": "poisson", "dim": 1},
    )


def bernoulli() -> ParametricFamily:
    """Bernoulli family in the success probability p (a mixture family)."""

    def logpdf(x, xi):
        p = xi[0]
        with np.errstate(invalid="ignore"):
            return np.where(x == 1, math.log(p), np.where(x == 0, math.log1p(-p), -np.inf))

    def score_fn(x, xi):
        p = xi[0]
        return (x / p - (1.0 - x) / (1.0 - p))[None, :]

    return ParametricFamily(
        name="bernoulli", dim=1, domain=box([(0.0, 1.0)]), support=IntegerRange(0, 1),
        log_density=logpdf, sampler=lambda xi, rng, count: (rng.random(count) < xi[0]).astype(float),
        score=score_fn, param_names=("p",), kind="mixture",
        spec={"kind": "bernoulli", "dim": 1},
    )


def categorical(k: int) -> ParametricFamily:
    """Categorical family on {0, ..., k-1} parametrised by (p_1, ..., p_{k-1})."""
    if k < 2:
        raise FamilyConstructionError("categorical needs k >= 2")
    n = k - 1

    def probs(xi):
        return np.concatenate([[1.0 - xi.sum()], xi])

    def logpdf(x, xi):
        p = probs(xi)
        idx = np.clip(np.asarray(x, dtype=int), 0, n)
        with np.errstate(divide="ignore"):
            out = np.log(p)[idx]
        return np.where((x >= 0) & (x <= n), out, -np.inf)

    def score_fn(x, xi):
        p = probs(xi)
        x = np.asarray(x)
        out = np.empty((n, x.size))
        zero = (x == 0) / p[0]
        for i in range(n):
            out[i] = (x == i + 1) / p[i + 1] - zero
        return out

    def sampler(xi, rng, count):
        cdf = np.cumsum(probs(xi))
        return np.minimum(np.searchsorted(cdf / cdf[-1], rng.random(count), side="right"), n).astype(float)

    margin = DOMAIN_MARGIN
    dom = Box(tuple([0.0] * n), tuple([1.0] * n), predicate=lambda xi: xi.sum() < 1.0 - margin,
              predicate_text="sum(p) < 1", reference=tuple([1.0 / k] * n))
    return ParametricFamily(
        name=f"categorical({k})", dim=n, domain=dom, support=IntegerRange(0, n),
        log_density=logpdf, sampler=sampler, score=score_fn,
        param_names=tuple(f"p{i + 1}" for i in range(n)), kind="mixture",
        spec={"kind": "categorical", "dim": n, "k": k},
    )


def uniform_beta_mixture() -> ParametricFamily:
    """p(x; xi) = 1 + xi (2x - 1) on [0, 1]: uniform mixed with Beta(2, 1), xi in (0, 1)."""
    spec = MixtureFamilySpec(
        carrier=lambda x: np.ones_like(np.asarray(x, dtype=float)),
        statistics=[lambda x: 2.0 * np.asarray(x, dtype=float) - 1.0],
        support=Interval(0.0, 1.0), name="uniform_beta_mixture")
    fam = make_mixture_family(spec, box([(0.0, 1.0)]))
    return replace(fam, spec={
        "kind": "mixture_family", "dim": 1, "carrier": "1", "statistics": ["2*x-1"],
        "support": {"type": "interval", "lo": 0.0, "hi": 1.0}, "domain": [[0.0, 1.0]]})


BUILTINS = {
    "gaussian": gaussian,
    "gaussian_known_sigma": gaussian_known_sigma,
    "gaussian_natural": gaussian_natural,
    "poisson": poisson,
    "bernoulli": bernoulli,
    "categorical": categorical,
    "mixture": uniform_beta_mixture,
}


# ---------------------------------------------------------------------------
# diagnostics


@dataclass(frozen=True)
class FamilyDiagnostics:
    xi: tuple
    reference: tuple
    normalization_residual: float
    score_mean_residual: float
    score_fd_deviation: Optional[float]
    support_invariant: bool
    support_mismatches: tuple
    converged: bool

    def to_json(self) -> dict:
        return {
            "xi": list(self.xi),
            "reference": list(self.reference),
            "normalization_residual": self.normalization_residual,
            "score_mean_residual": self.score_mean_residual,
            "score_fd_deviation": self.score_fd_deviation,
            "support_invariant": self.support_invariant,
            "support_mismatches": list(self.support_mismatches),
            "converged": self.converged,
        }


def validate_family(family: ParametricFamily, xi, reference=None,
                    budget: Budget = DEFAULT_BUDGET) -> FamilyDiagnostics:
    """Numerical regularity checks at xi; never raises for a failing check.

    ``normalization_residual`` is the mass deficit 1 - sum or integral of p.
    Support invariance compares where the log-density is finite, so tail
    underflow is not mistaken for a change of support.
    """
    xi = family.check_domain(xi)
    ref = family.domain.center() if reference is None else family.check_domain(reference)

    def attempt(f):
        try:
            r = expect(family, xi, f, budget)
            return np.asarray(r.value, dtype=float), r.converged
        except StatManifoldError:
            return np.nan, False

    mass, ok1 = attempt(lambda x: np.ones_like(x))
    smean, ok2 = attempt(lambda x: raw_score(family, x, xi))
    converged = ok1 and ok2

    center, scale = family.scale_hint(xi) if family.scale_hint else (0.0, 1.0)
    grid = support_grid(family.support, center, scale)
    with np.errstate(all="ignore"):
        pa = np.asarray(family.log_density(grid, xi), dtype=float) > -np.inf
        pb = np.asarray(family.log_density(grid, ref), dtype=float) > -np.inf
    mismatch = grid[pa != pb]

    fd_dev = None
    if family.score is not None:
        live = grid[pa]
        if live.size:
            analytic = raw_score(family, live, xi)
            h = _numdiff.domain_steps(family.domain, xi)
            numeric = _numdiff.central_derivative(lambda p: family.log_density(live, p), xi, h)
            fd_dev = float(np.max(np.abs(analytic - numeric)))

    return FamilyDiagnostics(
        xi=tuple(xi.tolist()), reference=tuple(np.asarray(ref).tolist()),
        normalization_residual=float(1.0 - mass),
        score_mean_residual=float(np.max(np.abs(smean))),
        score_fd_deviation=fd_dev,
        support_invariant=bool(mismatch.size == 0),
        support_mismatches=tuple(mismatch[:8].tolist()),
        converged=bool(converged),
    )
