"""Estimator experiments: Cramer-Rao checks and the second-order MSE expansion.

Monte Carlo trials are drawn in fixed-size blocks, each from its own
``SeedSequence`` child, so results depend only on (seed, N, trials) and not
on how many worker threads run the blocks.  Standard errors are grouped
(delete-a-group) jackknife estimates over ``JACKKNIFE_GROUPS`` contiguous
groups of trials.

Index conventions for the expansion terms: model indices a..f are raised
and lowered with the induced metric g_ab and its inverse, ambient indices
kappa..nu with the ambient Fisher metric.  Arrays:

* model connection (second kind) ``[a, c, d]`` = Gamma^a_{cd}
* embedding curvature ``[kappa, a, b]`` = H^kappa_{ab}
* ancillary curvature ``[a, kappa, lambda]`` = H^a_{kappa lambda}
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import _numdiff
from .connection import christoffel_at
from .errors import DegeneracyError, DimensionError, ExperimentError, StatManifoldError
from .family import Box, ParametricFamily, raw_score
from .integrate import DEFAULT_BUDGET, Budget
from .metric import FisherMatrix, fisher_matrix, from_entries, inverse_metric

JACKKNIFE_GROUPS = 100
MAX_DISCARD_FRACTION = 0.01
BLOCK_DRAWS = 1 << 20
INAPPLICABLE = "INAPPLICABLE"
PASS = "PASS"
FAIL = "FAIL"


def _workers() -> int:
    try:
        return max(1, int(os.environ.get("STATMANIFOLD_THREADS", "1")))
    except ValueError:
        return 1


# ---------------------------------------------------------------------------
# estimators


@dataclass(frozen=True)
class EstimatorSpec:
    """An estimator: ``map`` takes one sample array and returns a parameter vector.

    ``batch_map`` (optional) maps a ``(trials, N)`` array to ``(trials, n)``
    and is used instead of ``map`` when present.
    """

    name: str
    map: Callable
    claims_unbiased: bool = False
    batch_map: Optional[Callable] = None

    def apply(self, samples: np.ndarray) -> np.ndarray:
        if self.batch_map is not None:
            out = np.asarray(self.batch_map(samples), dtype=float)
            return out.reshape(samples.shape[0], -1)
        return np.array([np.atleast_1d(np.asarray(self.map(row), dtype=float)) for row in samples])


def sample_mean(claims_unbiased: bool = True) -> EstimatorSpec:
    return EstimatorSpec("mean", lambda x: np.array([np.mean(x)]), claims_unbiased,
                         lambda s: s.mean(axis=1)[:, None])


def sample_median(claims_unbiased: bool = True) -> EstimatorSpec:
    return EstimatorSpec("median", lambda x: np.array([np.median(x)]), claims_unbiased,
                         lambda s: np.median(s, axis=1)[:, None])


def constant_estimator(value) -> EstimatorSpec:
    value = np.atleast_1d(np.asarray(value, dtype=float))
    return EstimatorSpec("constant", lambda x: value.copy(), False,
                         lambda s: np.broadcast_to(value, (s.shape[0], value.size)).copy())


def shifted_estimator(base: EstimatorSpec, delta) -> EstimatorSpec:
    delta = np.atleast_1d(np.asarray(delta, dtype=float))
    batch = None if base.batch_map is None else (lambda s: base.apply(s) + delta)
    return EstimatorSpec(f"{base.name}+shift", lambda x: np.atleast_1d(base.map(x)) + delta, False, batch)


def expression_estimator(expr, claims_unbiased: bool = False) -> EstimatorSpec:
    """Applies a compiled expression in ``x`` to the sample mean."""
    return EstimatorSpec(f"expr:{getattr(expr, 'source', expr)}",
                         lambda x: np.atleast_1d(expr(np.mean(x))), claims_unbiased,
                         lambda s: np.asarray(expr(s.mean(axis=1)), dtype=float)[:, None])


def mle_estimator(family: ParametricFamily) -> EstimatorSpec:
    """Maximum-likelihood estimator for the built-in families and exponential families."""
    name = family.spec.get("kind", family.name)
    if family.name == "gaussian":
        def batch(s):
            return np.column_stack([s.mean(axis=1), s.std(axis=1)])
        return EstimatorSpec("mle", lambda x: batch(np.atleast_2d(x))[0], False, batch)
    if family.name in ("gaussian_known_sigma", "bernoulli"):
        mean = sample_mean()
        return EstimatorSpec("mle", mean.map, True, mean.batch_map)
    if family.name.startswith("categorical"):
        n = family.dim

        def batch(s):
            return np.stack([(s == i + 1).mean(axis=1) for i in range(n)], axis=1)
        return EstimatorSpec("mle", lambda x: batch(np.atleast_2d(x))[0], True, batch)
    if family.name == "poisson":
        def batch(s):
            m = s.mean(axis=1)
            with np.errstate(divide="ignore"):
                return np.where(m > 0, np.log(np.where(m > 0, m, 1.0)), np.nan)[:, None]
        return EstimatorSpec("mle", lambda x: batch(np.atleast_2d(x))[0], False, batch)
    if family.exponential is not None:
        model = CurvedModelSpec(family, lambda u: u, family.domain, name=family.name)
        return curved_mle(model)
    raise StatManifoldError(f"no maximum-likelihood estimator available for {name}")


# ---------------------------------------------------------------------------
# Monte Carlo engine


def _block_layout(trials: int, N: int) -> list[int]:
    per_block = max(1, BLOCK_DRAWS // max(N, 1))
    sizes = [per_block] * (trials // per_block)
    if trials % per_block:
        sizes.append(trials % per_block)
    return sizes


def _run_blocks(family, xi, N, trials, seed, work: Callable):
    """Apply ``work(samples)`` to each block of trials; results in block order."""
    sizes = _block_layout(trials, N)
    children = np.random.SeedSequence(seed).spawn(len(sizes))

    def one(args):
        size, child = args
        rng = np.random.default_rng(child)
        samples = np.asarray(family.sampler(xi, rng, size * N), dtype=float).reshape(size, N)
        return work(samples)

    jobs = list(zip(sizes, children))
    workers = _workers()
    if workers > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(one, jobs))
    return [one(j) for j in jobs]


def _groups(T: int) -> list[slice]:
    G = min(JACKKNIFE_GROUPS, T)
    edges = np.linspace(0, T, G + 1).round().astype(int)
    return [slice(edges[g], edges[g + 1]) for g in range(G)]


def _jackknife(values: np.ndarray, stat: Callable):
    """Full-sample statistic, its grouped-jackknife SE and the replicates."""
    full = stat(values)
    groups = _groups(values.shape[0])
    if len(groups) < 2:
        return full, np.zeros_like(np.asarray(full)), np.asarray([full])
    reps = []
    for sl in groups:
        keep = np.ones(values.shape[0], dtype=bool)
        keep[sl] = False
        reps.append(stat(values[keep]))
    reps = np.asarray(reps)
    G = len(groups)
    se = np.sqrt((G - 1) / G * np.sum((reps - reps.mean(axis=0)) ** 2, axis=0))
    return full, se, reps


@dataclass(frozen=True)
class CovarianceReport:
    xi_true: tuple
    N: int
    trials: int
    mean_estimate: np.ndarray
    bias: np.ndarray
    bias_se: np.ndarray
    covariance: np.ndarray
    standard_errors: np.ndarray
    centered_covariance: np.ndarray
    centered_standard_errors: np.ndarray
    covariance_replicates: np.ndarray
    estimator: str = ""
    claims_unbiased: bool = False
    discarded: int = 0
    seed: int = 0

    def to_json(self) -> dict:
        return {
            "xi_true": list(self.xi_true), "N": self.N, "trials": self.trials,
            "estimator": self.estimator, "claims_unbiased": self.claims_unbiased,
            "discarded": self.discarded, "seed": self.seed,
            "mean_estimate": self.mean_estimate.tolist(), "bias": self.bias.tolist(),
            "bias_se": self.bias_se.tolist(), "covariance": self.covariance.tolist(),
            "standard_errors": self.standard_errors.tolist(),
            "centered_covariance": self.centered_covariance.tolist(),
            "centered_standard_errors": self.centered_standard_errors.tolist(),
        }


def _outer_mean(e: np.ndarray) -> np.ndarray:
    m = e.T @ e / e.shape[0]
    return 0.5 * (m + m.T)


def _centered(e: np.ndarray) -> np.ndarray:
    d = e - e.mean(axis=0)
    m = d.T @ d / max(e.shape[0] - 1, 1)
    return 0.5 * (m + m.T)


def _discard_check(ok: np.ndarray, what: str) -> int:
    discarded = int((~ok).sum())
    if discarded > MAX_DISCARD_FRACTION * ok.size:
        raise ExperimentError(
            f"{what}: {discarded} of {ok.size} trials gave non-finite estimates "
            f"(more than {MAX_DISCARD_FRACTION:.0%})")
    return discarded


def estimator_covariance(family: ParametricFamily, xi_true, est: EstimatorSpec, N: int,
                         trials: int, seed: int = 0) -> CovarianceReport:
    """Bias and covariance (around xi_true, and around the mean) of an estimator."""
    xi_true = family.check_domain(xi_true)
    if N < 1 or trials < 2:
        raise ValueError("need N >= 1 and trials >= 2")
    blocks = _run_blocks(family, xi_true, N, trials, seed, est.apply)
    est_all = np.concatenate(blocks, axis=0)
    ok = np.all(np.isfinite(est_all), axis=1)
    discarded = _discard_check(ok, est.name)
    e = est_all[ok] - xi_true
    bias, bias_se, _ = _jackknife(e, lambda v: v.mean(axis=0))
    cov, cov_se, cov_reps = _jackknife(e, _outer_mean)
    ccov, ccov_se, _ = _jackknife(e, _centered)
    return CovarianceReport(
        xi_true=tuple(xi_true.tolist()), N=int(N), trials=int(ok.sum()),
        mean_estimate=xi_true + bias, bias=bias, bias_se=bias_se,
        covariance=cov, standard_errors=cov_se, centered_covariance=ccov,
        centered_standard_errors=ccov_se, covariance_replicates=cov_reps,
        estimator=est.name, claims_unbiased=est.claims_unbiased,
        discarded=discarded, seed=int(seed))


@dataclass(frozen=True)
class CramerRaoVerdict:
    verdict: str
    reason: str
    bound: np.ndarray
    difference: np.ndarray
    eigenvalues: np.ndarray
    min_eigenvalue_se: float
    efficiency_ratios: np.ndarray
    near_equality: bool

    @property
    def passed(self) -> bool:
        return self.verdict == PASS

    def to_json(self) -> dict:
        return {
            "verdict": self.verdict, "reason": self.reason, "bound": self.bound.tolist(),
            "difference": self.difference.tolist(), "eigenvalues": self.eigenvalues.tolist(),
            "min_eigenvalue_se": self.min_eigenvalue_se,
            "efficiency_ratios": self.efficiency_ratios.tolist(),
            "near_equality": self.near_equality,
        }


def cramer_rao_check(report: CovarianceReport, g: FisherMatrix, n_se: float = 3.0) -> CramerRaoVerdict:
    """Loewner-order test of covariance >= g^{-1} / N.

    PASS when the smallest eigenvalue of the difference is above
    ``-n_se`` jackknife standard errors.  Estimators that do not claim
    unbiasedness, or whose measured bias exceeds ``n_se`` standard errors,
    get an INAPPLICABLE verdict.
    """
    if tuple(g.at) != tuple(report.xi_true):
        from .errors import BasePointMismatch
        raise BasePointMismatch(f"report at {list(report.xi_true)} but metric at {list(g.at)}")
    bound = inverse_metric(g) / report.N
    D = report.covariance - bound
    eig = np.linalg.eigvalsh(D)
    reps = report.covariance_replicates
    G = reps.shape[0]
    if G > 1:
        lam = np.array([np.linalg.eigvalsh(r - bound) for r in reps])
        se = np.sqrt((G - 1) / G * np.sum((lam - lam.mean(axis=0)) ** 2, axis=0))
    else:
        se = np.zeros_like(eig)
    L = np.linalg.cholesky(bound)
    Linv = np.linalg.inv(L)
    ratios = np.linalg.eigvalsh(Linv @ report.covariance @ Linv.T)

    floor = 1e-12 * np.max(np.abs(bound))   # rounding allowance for exact reports
    biased = np.any(np.abs(report.bias) > n_se * report.bias_se) if np.any(report.bias_se > 0) \
        else np.any(report.bias != 0)
    if not report.claims_unbiased:
        verdict, reason = INAPPLICABLE, "estimator does not claim to be unbiased"
    elif biased:
        verdict, reason = INAPPLICABLE, f"measured bias {report.bias.tolist()} exceeds {n_se} standard errors"
    elif eig[0] >= -(n_se * se[0] + floor):
        verdict, reason = PASS, "covariance dominates the inverse Fisher bound"
    else:
        verdict, reason = FAIL, f"smallest eigenvalue {eig[0]:.3g} below -{n_se} SE ({se[0]:.3g})"
    near = bool(np.all(np.abs(eig) <= n_se * se + floor))
    return CramerRaoVerdict(verdict, reason, bound, D, eig, float(se[0]), ratios, near)


# ---------------------------------------------------------------------------
# curved models


@dataclass(frozen=True)
class CurvedModelSpec:
    """Submodel u -> xi(u) of an (exponential) ambient family.

    ``embedding`` maps an m-vector to an n-vector and should broadcast over
    leading axes (``(..., m) -> (..., n)``) for the vectorised MLE.
    ``jacobian``, when given, returns the ``(n, m)`` matrix d xi / d u.
    """

    ambient: ParametricFamily
    embedding: Callable
    u_domain: Box
    jacobian: Optional[Callable] = None
    name: str = "model"

    @property
    def m(self) -> int:
        return self.u_domain.dim

    @property
    def n(self) -> int:
        return self.ambient.dim

    def xi(self, u) -> np.ndarray:
        return np.asarray(self.embedding(np.asarray(u, dtype=float)), dtype=float).reshape(self.n)

    def tangent(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        if self.jacobian is not None:
            return np.asarray(self.jacobian(u), dtype=float).reshape(self.n, self.m)
        h = _numdiff.steps(u)
        return _numdiff.central_derivative(self.xi, u, h).T

    def second_derivative(self, u) -> np.ndarray:
        """d^2 xi^kappa / du^a du^b, indexed ``[kappa, a, b]``."""
        u = np.asarray(u, dtype=float)
        m = self.m
        if self.jacobian is not None:
            h = _numdiff.steps(u)
            d = _numdiff.central_derivative(self.tangent, u, h)   # [b, kappa, a]
            out = np.transpose(d, (1, 2, 0))
            return 0.5 * (out + np.swapaxes(out, 1, 2))
        h = _numdiff.steps(u, _numdiff.QUARTIC_EPS)
        out = np.empty((self.n, m, m))
        x0 = self.xi(u)
        for a in range(m):
            ea = np.zeros(m)
            ea[a] = h[a]
            out[:, a, a] = (self.xi(u + ea) - 2.0 * x0 + self.xi(u - ea)) / h[a] ** 2
            for b in range(a + 1, m):
                eb = np.zeros(m)
                eb[b] = h[b]
                v = (self.xi(u + ea + eb) - self.xi(u + ea - eb)
                     - self.xi(u - ea + eb) + self.xi(u - ea - eb)) / (4.0 * h[a] * h[b])
                out[:, a, b] = out[:, b, a] = v
        return out


@dataclass(frozen=True)
class InducedGeometry:
    u: tuple
    xi: np.ndarray
    B: np.ndarray
    g_ambient: FisherMatrix
    g_model: FisherMatrix


def induced_geometry(model: CurvedModelSpec, u, budget: Budget = DEFAULT_BUDGET) -> InducedGeometry:
    """Pull the ambient Fisher metric back along the embedding: g_ab = B^T g B."""
    u = model.u_domain.check(u)
    xi = model.ambient.check_domain(model.xi(u))
    B = model.tangent(u)
    sv = np.linalg.svd(B, compute_uv=False)
    if sv.size == 0 or sv[-1] <= 1e-10 * max(sv[0], 1e-300) or sv[0] == 0:
        raise DegeneracyError(f"embedding Jacobian is rank deficient at u={u.tolist()} "
                              f"(singular values {sv.tolist()})")
    gA = fisher_matrix(model.ambient, xi, budget)
    gM = from_entries(B.T @ gA.entries @ B, at=u)
    return InducedGeometry(tuple(u.tolist()), xi, B, gA, gM)


def _covariant_second_derivative(model, geo: InducedGeometry, alpha, budget):
    C = christoffel_at(model.ambient, geo.xi, alpha, budget)
    D2 = model.second_derivative(np.asarray(geo.u))
    raw = D2 + np.einsum("klm,la,mb->kab", C, geo.B, geo.B)
    return 0.5 * (raw + np.swapaxes(raw, 1, 2))


def embedding_curvature(model: CurvedModelSpec, u, alpha: float,
                        budget: Budget = DEFAULT_BUDGET) -> np.ndarray:
    """H^kappa_{ab}: normal part of the ambient alpha-covariant derivative of the embedding."""
    geo = induced_geometry(model, u, budget)
    raw = _covariant_second_derivative(model, geo, alpha, budget)
    B, gA = geo.B, geo.g_ambient.entries
    P_tan = B @ inverse_metric(geo.g_model) @ B.T @ gA
    normal = np.eye(model.n) - P_tan
    return np.einsum("kl,lab->kab", normal, raw)


def model_connection(model: CurvedModelSpec, u, alpha: float,
                     budget: Budget = DEFAULT_BUDGET) -> np.ndarray:
    """Induced alpha-connection of the model in u coordinates, second kind ``[a, c, d]``."""
    geo = induced_geometry(model, u, budget)
    raw = _covariant_second_derivative(model, geo, alpha, budget)
    first = np.einsum("kcd,kl,lb->cdb", raw, geo.g_ambient.entries, geo.B)
    return np.einsum("ab,cdb->acd", inverse_metric(geo.g_model), first)


@dataclass(frozen=True)
class MseExpansionTerms:
    at: tuple
    g_model: np.ndarray
    gamma_m_sq: np.ndarray
    h_e_sq: np.ndarray
    h_m_a_sq: np.ndarray
    K: np.ndarray
    ancillary_assumed_m_flat: bool = False

    def to_json(self) -> dict:
        return {
            "at": list(self.at), "g_ab": self.g_model.tolist(),
            "g_inverse": np.linalg.inv(self.g_model).tolist(), "K_ab": self.K.tolist(),
            "components": {"gamma_m_sq": self.gamma_m_sq.tolist(), "h_e_sq": self.h_e_sq.tolist(),
                           "h_m_a_sq": self.h_m_a_sq.tolist()},
            "flags": {"ancillary_assumed_m_flat": self.ancillary_assumed_m_flat},
        }


def _as_matrix(g) -> np.ndarray:
    return g.entries if isinstance(g, FisherMatrix) else np.atleast_2d(np.asarray(g, dtype=float))


def k_tensor(gamma_m_model, h_e, h_m_a, g_model, g_ambient, at=(),
             ancillary_assumed_m_flat: bool = False) -> MseExpansionTerms:
    """Assemble K^{ab} = (Gamma^(m)_M)^2 + 2 (H^(e)_M)^2 + (H^(m)_A)^2.

    (Gamma^2)^{ab}   = Gamma^a_{cd} Gamma^b_{ef} g^{ce} g^{df}
    (H_e^2)^{ab}     = H^k_{ce} H^l_{df} g_{kl} g^{cd} g^{ea} g^{fb}
    (H_mA^2)^{ab}    = H^a_{kl} H^b_{mn} g^{km} g^{ln}
    """
    gM = _as_matrix(g_model)
    gA = _as_matrix(g_ambient)
    m, n = gM.shape[0], gA.shape[0]
    G = np.asarray(gamma_m_model, dtype=float)
    He = np.asarray(h_e, dtype=float)
    Ha = np.asarray(h_m_a, dtype=float)
    if gM.shape != (m, m) or gA.shape != (n, n):
        raise DimensionError("metrics must be square")
    if G.shape != (m, m, m):
        raise DimensionError(f"model connection must have shape {(m, m, m)}, got {G.shape}")
    if He.shape != (n, m, m):
        raise DimensionError(f"embedding curvature must have shape {(n, m, m)}, got {He.shape}")
    if Ha.shape != (m, n, n):
        raise DimensionError(f"ancillary curvature must have shape {(m, n, n)}, got {Ha.shape}")
    gMi = np.linalg.inv(gM)
    gAi = np.linalg.inv(gA)
    gamma_sq = np.einsum("acd,bef,ce,df->ab", G, G, gMi, gMi)
    he_sq = np.einsum("kce,ldf,kl,cd,ea,fb->ab", He, He, gA, gMi, gMi, gMi)
    ha_sq = np.einsum("akl,bmn,km,ln->ab", Ha, Ha, gAi, gAi)
    K = gamma_sq + 2.0 * he_sq + ha_sq
    return MseExpansionTerms(tuple(np.asarray(at, dtype=float).tolist()), gM, gamma_sq, he_sq,
                             ha_sq, K, ancillary_assumed_m_flat)


def asymptotic_mse(g_model, K, N: int) -> np.ndarray:
    """(1/N) g^{ab} + (1/(2 N^2)) K^{ab}."""
    if N < 1:
        raise ValueError("N must be >= 1")
    g = _as_matrix(g_model)
    return inverse_metric(from_entries(g)) / N + np.asarray(K, dtype=float) / (2.0 * N * N)


def expansion_terms(model: CurvedModelSpec, u, h_m_a=None,
                    budget: Budget = DEFAULT_BUDGET) -> MseExpansionTerms:
    """K^{ab} at u for the model; H^(m)_A defaults to zero (flagged)."""
    geo = induced_geometry(model, u, budget)
    gamma_m = model_connection(model, u, -1.0, budget)
    h_e = embedding_curvature(model, u, 1.0, budget)
    flat = h_m_a is None
    if flat:
        h_m_a = np.zeros((model.m, model.n, model.n))
    return k_tensor(gamma_m, h_e, h_m_a, geo.g_model, geo.g_ambient, at=geo.u,
                    ancillary_assumed_m_flat=flat)


def first_order_bias(model: CurvedModelSpec, u, budget: Budget = DEFAULT_BUDGET) -> np.ndarray:
    """N times the leading bias of the MLE: -1/2 Gamma^(m)a_{cd} g^{cd}."""
    geo = induced_geometry(model, u, budget)
    gamma_m = model_connection(model, u, -1.0, budget)
    return -0.5 * np.einsum("acd,cd->a", gamma_m, inverse_metric(geo.g_model))


# ---------------------------------------------------------------------------
# curved-model MLE


def _batched_embedding(model: CurvedModelSpec, U: np.ndarray) -> np.ndarray:
    try:
        out = np.asarray(model.embedding(U), dtype=float)
        if out.shape == U.shape[:-1] + (model.n,):
            return out
    except Exception:  # noqa: BLE001 - fall back to a per-row loop
        pass
    return np.array([model.xi(u) for u in U])


def _solve_rows(A: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Batched solve of A x = b; singular rows give NaN."""
    try:
        return np.linalg.solve(A, b[..., None])[..., 0]
    except np.linalg.LinAlgError:
        out = np.full_like(b, np.nan)
        for r in range(A.shape[0]):
            try:
                out[r] = np.linalg.solve(A[r], b[r])
            except np.linalg.LinAlgError:
                pass
        return out


def curved_mle(model: CurvedModelSpec, max_iter: int = 100, tol: float = 1e-9,
               start=None, max_halvings: int = 40) -> EstimatorSpec:
    """Vectorised MLE of u by Fisher scoring on the sufficient statistics.

    Each scoring step is halved until the log-likelihood does not decrease
    and the point stays inside both domains.  Needs an ambient exponential
    family with a closed-form log-partition.  Iterations start from
    ``start`` (default: the u-domain center); trials that fail to converge
    or cannot stay in the domain return NaN.
    """
    expo = model.ambient.exponential
    if expo is None or not expo.closed_form:
        raise StatManifoldError(
            "curved MLE needs an ambient exponential family with a closed-form log-partition")
    m, n = model.m, model.n
    u0 = model.u_domain.center() if start is None else np.asarray(start, dtype=float)

    def admissible(U):
        ok = model.u_domain.contains_rows(U)
        if np.any(ok):
            keep = np.nonzero(ok)[0]
            ok[keep] = model.ambient.domain.contains_rows(_batched_embedding(model, U[keep]))
        return ok

    def loglik(U, Fb):
        theta = _batched_embedding(model, U)
        with np.errstate(all="ignore"):
            return np.einsum("tn,tn->t", theta, Fb) - np.asarray(expo.psi(theta), dtype=float).reshape(-1)

    def batch(samples: np.ndarray) -> np.ndarray:
        T, N = samples.shape
        Fbar = expo.statistics(samples.ravel()).reshape(n, T, N).mean(axis=2).T   # (T, n)
        U = np.broadcast_to(u0, (T, m)).copy()
        active = np.ones(T, dtype=bool)
        for _ in range(max_iter):
            idx = np.nonzero(active)[0]
            if idx.size == 0:
                break
            Ua, Fa = U[idx], Fbar[idx]
            theta = _batched_embedding(model, Ua)
            ha = _numdiff.CBRT_EPS * np.maximum(1.0, np.abs(Ua))
            B = np.empty((idx.size, n, m))
            for a in range(m):
                e = np.zeros(m)
                e[a] = 1.0
                B[:, :, a] = (_batched_embedding(model, Ua + ha * e) -
                              _batched_embedding(model, Ua - ha * e)) / (2.0 * ha[:, a:a + 1])
            with np.errstate(all="ignore"):
                grad = np.einsum("tna,tn->ta", B, Fa - expo.psi_grad(theta))
                info = np.einsum("tna,tnk,tkb->tab", B, expo.psi_hess(theta), B)
                step = _solve_rows(info, grad)
            l0 = loglik(Ua, Fa)
            scale = np.ones(idx.size)
            pending = np.all(np.isfinite(step), axis=1)
            accepted = np.zeros(idx.size, dtype=bool)
            Unew = Ua.copy()
            for _ in range(max_halvings):
                rows = np.nonzero(pending)[0]
                if rows.size == 0:
                    break
                trial = Ua[rows] + scale[rows, None] * step[rows]
                ok = admissible(trial)
                if np.any(ok):
                    good = rows[ok]
                    gain = loglik(trial[ok], Fa[good]) - l0[good]
                    up = gain >= -1e-12 * np.maximum(1.0, np.abs(l0[good]))
                    Unew[good[up]] = trial[ok][up]
                    accepted[good[up]] = True
                    pending[good[up]] = False
                scale[pending] *= 0.5
            failed = ~accepted
            U[idx[failed]] = np.nan
            active[idx[failed]] = False
            moved = np.max(np.abs(Unew - Ua), axis=1)
            done = accepted & (moved <= tol * np.maximum(1.0, np.max(np.abs(Unew), axis=1)))
            U[idx[accepted]] = Unew[accepted]
            active[idx[done]] = False
        U[active] = np.nan
        return U

    return EstimatorSpec("mle", lambda x: batch(np.atleast_2d(np.asarray(x, dtype=float)))[0],
                         False, batch)


# ---------------------------------------------------------------------------
# MSE experiment


@dataclass(frozen=True)
class MseRow:
    N: int
    trials: int
    discarded: int
    bias: np.ndarray
    mse: np.ndarray
    mse_se: np.ndarray
    predicted_first: np.ndarray
    predicted_second: np.ndarray
    residual_naive: np.ndarray
    residual_cv: np.ndarray
    residual_cv_se: np.ndarray

    @property
    def n_mse(self) -> np.ndarray:
        return self.N * self.mse

    @property
    def scaled_residual(self) -> np.ndarray:
        """N^2 (MSE - g^{-1}/N), control-variate estimate."""
        return self.N ** 2 * self.residual_cv

    def to_json(self) -> dict:
        return {
            "N": self.N, "trials": self.trials, "discarded": self.discarded,
            "bias": self.bias.tolist(), "mse": self.mse.tolist(), "mse_se": self.mse_se.tolist(),
            "predicted_first": self.predicted_first.tolist(),
            "predicted_second": self.predicted_second.tolist(),
            "N_mse": self.n_mse.tolist(),
            "N2_residual_naive": (self.N ** 2 * self.residual_naive).tolist(),
            "N2_residual_cv": self.scaled_residual.tolist(),
            "N2_residual_cv_se": (self.N ** 2 * self.residual_cv_se).tolist(),
        }


@dataclass(frozen=True)
class MseExperimentReport:
    u_true: tuple
    terms: MseExpansionTerms
    bias_correction: str
    rows: list = field(default_factory=list)

    def to_json(self) -> dict:
        out = self.terms.to_json()
        out.update({"u_true": list(self.u_true), "bias_correction": self.bias_correction,
                    "rows": [r.to_json() for r in self.rows]})
        out["flags"]["first_order_efficient_assumed"] = True
        return out


def mse_experiment(model: CurvedModelSpec, u_true, estimator: EstimatorSpec, N_list: Sequence[int],
                   trials: int | None = None, seed: int = 0, bias_correction: str = "geometric",
                   h_m_a=None, max_trials: int = 1_600_000,
                   budget: Budget = DEFAULT_BUDGET) -> MseExperimentReport:
    """Empirical MSE of a bias-corrected estimator against the asymptotic expansion.

    ``bias_correction``:

    * ``"geometric"`` subtracts the MLE's leading bias b(u)/N, linearised
      around the true point (b from :func:`first_order_bias`),
    * ``"empirical"`` subtracts the measured mean error (a constant shift),
    * ``"none"`` leaves the estimates alone.

    The second-order residual MSE - g^{-1}/N is estimated with the control
    variate L = g^{-1} B^T (mean ambient score), whose second moment is
    exactly g^{-1}/N.  With ``trials=None`` trials start at 1e5 and double
    until the residual's standard error is below a tenth of the predicted
    second-order term, or ``max_trials`` is reached.
    """
    u_true = model.u_domain.check(u_true)
    N_list = [int(N) for N in N_list]
    if any(b <= a for a, b in zip(N_list, N_list[1:])):
        raise ValueError("N_list must be ascending")
    if bias_correction not in ("geometric", "empirical", "none"):
        raise ValueError(f"unknown bias correction {bias_correction!r}")
    geo = induced_geometry(model, u_true, budget)
    terms = expansion_terms(model, u_true, h_m_a, budget)
    g_inv = inverse_metric(geo.g_model)
    xi_true = geo.xi
    B = geo.B
    lift = g_inv @ B.T            # (m, n): ambient score -> control variate

    if bias_correction == "geometric":
        beta = first_order_bias(model, u_true, budget)
        hu = _numdiff.steps(u_true, 1e-4)
        dbeta = _numdiff.central_derivative(lambda p: first_order_bias(model, p, budget), u_true, hu)  # [c, a]
    else:
        beta = np.zeros(model.m)
        dbeta = np.zeros((model.m, model.m))

    def work(samples):
        est = estimator.apply(samples)
        s = raw_score(model.ambient, samples.ravel(), xi_true)
        sbar = s.reshape(model.n, *samples.shape).mean(axis=2).T    # (T, n)
        return est, sbar @ lift.T

    rows = []
    for N in N_list:
        T = int(trials) if trials is not None else 100_000
        while True:
            blocks = _run_blocks(model.ambient, xi_true, N, T, seed + N, work)
            est = np.concatenate([b[0] for b in blocks])
            L = np.concatenate([b[1] for b in blocks])
            ok = np.all(np.isfinite(est), axis=1)
            discarded = _discard_check(ok, estimator.name)
            est, L = est[ok], L[ok]
            e_raw = est - u_true
            e = e_raw - beta / N - (e_raw @ dbeta) / N
            if bias_correction == "empirical":
                e = e - e.mean(axis=0)
            mse, mse_se, _ = _jackknife(e, _outer_mean)
            resid, resid_se, _ = _jackknife(np.hstack([e, L]), lambda v: _outer_mean(v[:, :model.m])
                                            - _outer_mean(v[:, model.m:]))
            target = np.max(np.abs(terms.K)) / (2.0 * N * N)
            if trials is not None or target == 0 or np.max(resid_se) < 0.1 * target or 2 * T > max_trials:
                break
            T *= 2
        rows.append(MseRow(
            N=N, trials=int(ok.sum()), discarded=discarded, bias=e_raw.mean(axis=0),
            mse=mse, mse_se=mse_se, predicted_first=g_inv / N,
            predicted_second=asymptotic_mse(geo.g_model, terms.K, N),
            residual_naive=mse - g_inv / N, residual_cv=resid, residual_cv_se=resid_se))
    return MseExperimentReport(tuple(u_true.tolist()), terms, bias_correction, rows)
