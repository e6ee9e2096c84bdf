"""Point estimates, variance estimators, truncated-normal quantiles, and CIs.

The acceptance event of a balance criterion turns the asymptotic law of the
centered, scaled estimator into a mixture of a normal component and one or
more truncated first-coordinate components. Quantiles of that law have no
closed form, so they are computed by Monte Carlo with a recorded seed and a
reported standard error.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field

import numpy as np

from . import numeric
from .balance import BalanceCriterion, DesignMatrices, Variant
from .design import Assignment, StratifiedPopulation, arm_indices
from .errors import (
    DomainError,
    InsufficientArm,
    MissingPotentialOutcomes,
)
from .rng import LANE_LAW, rng_from

__all__ = [
    "TruncatedGaussianLaw",
    "InferenceReport",
    "observed_outcomes",
    "stratified_diff_in_means",
    "v_pa",
    "sample_L_pa",
    "sample_L_pa_many",
    "nu_quantile",
    "nu_quantiles",
    "overall_variance_estimators",
    "stratum_variance_estimators",
    "OverallEstimates",
    "StratumEstimates",
    "ci_sr",
    "ci_srrom",
    "ci_srrsm",
    "analyze_assignment",
    "theoretical_variances",
    "TheoreticalVariances",
    "srrdm_bias",
    "SrrdmBias",
]

DEFAULT_LAW_DRAWS = 200_000


# ---------------------------------------------------------------------------
# Point estimation
# ---------------------------------------------------------------------------


def observed_outcomes(pop: StratifiedPopulation, assignment: Assignment) -> np.ndarray:
    """Observed outcome vector: the recorded one, or assembled from potentials."""
    if pop.observed is not None:
        return pop.observed
    if not pop.has_potentials():
        raise MissingPotentialOutcomes(
            "population has neither observed outcomes nor both potential outcomes"
        )
    z = assignment.z
    return np.where(z == 1, pop.y1, pop.y0)


def stratified_diff_in_means(
    pop: StratifiedPopulation, assignment: Assignment, outcomes: np.ndarray | None = None
) -> float:
    """Stratum-size weighted difference of arm means of the observed outcome."""
    y = observed_outcomes(pop, assignment) if outcomes is None else outcomes
    pi = pop.weights
    total = 0.0
    for k in range(pop.k):
        treated, control = arm_indices(pop, assignment, k)
        total += pi[k] * (y[treated].mean() - y[control].mean())
    return float(total)


# ---------------------------------------------------------------------------
# The truncated first-coordinate law
# ---------------------------------------------------------------------------


def v_pa(p: int, a: float) -> float:
    """Variance of the truncated first coordinate: P(chi2_{p+2} <= a) / P(chi2_p <= a)."""
    if not a > 0:
        raise DomainError(f"v_pa requires a > 0, got {a}")
    if a == math.inf:
        return 1.0
    return numeric.chi2_cdf(p + 2, a) / numeric.chi2_cdf(p, a)


@functools.lru_cache(maxsize=64)
def _trunc_radius_table(p: int, a: float, points: int = 4097):
    """Grid of (x, CDF(x)) for the chi-square law restricted to [0, a].

    Quadratically spaced toward 0 so the steep start at p = 1 is resolved;
    used for vectorized inverse-CDF sampling of the truncated squared radius.
    """
    t = np.linspace(0.0, 1.0, points)
    xs = a * t * t
    cdf = np.array([numeric.chi2_cdf(p, x) for x in xs])
    return xs, cdf


def sample_L_pa(p: int, a: float, rng: np.random.Generator) -> float:
    """One draw of the first coordinate of a standard normal vector in R^p
    conditioned on its squared norm being below ``a``.

    Rejection sampling by default. When the acceptance probability is below
    1e-2 the draw switches to the radial decomposition: squared radius from
    the chi-square law truncated to [0, a] by CDF inversion, times the first
    coordinate of a uniform direction; spherical symmetry makes the two
    routes distributionally identical.
    """
    if not a > 0:
        raise DomainError(f"sample_L_pa requires a > 0, got {a}")
    if a == math.inf:
        return float(rng.standard_normal())
    acceptance = numeric.chi2_cdf(p, a)
    if acceptance >= 1e-2:
        while True:
            d = rng.standard_normal(p)
            if float(d @ d) < a:
                return float(d[0])
    u = rng.random() * acceptance
    r = math.sqrt(numeric.chi2_quantile(p, u)) if u > 0 else 0.0
    z = rng.standard_normal(p)
    return r * float(z[0]) / float(math.sqrt(z @ z))


def sample_L_pa_many(p: int, a: float, size: int, rng: np.random.Generator) -> np.ndarray:
    """Vectorized draws of the truncated first coordinate (radial route)."""
    if not a > 0:
        raise DomainError(f"sample_L_pa_many requires a > 0, got {a}")
    if a == math.inf:
        return rng.standard_normal(size)
    xs, cdf = _trunc_radius_table(p, a)
    u = rng.random(size) * cdf[-1]
    r = np.sqrt(np.interp(u, cdf, xs))
    z = rng.standard_normal((size, p))
    u1 = z[:, 0] / np.sqrt(np.einsum("ij,ij->i", z, z))
    return r * u1


@dataclass(frozen=True)
class TruncatedGaussianLaw:
    """The law  normal_scale * eps0  +  sum_k trunc_scales[k] * L_k,

    where eps0 is standard normal and each L_k is an independent truncated
    first coordinate in dimension p with threshold thresholds[k]. Covers both
    the single-component overall law and the per-stratum mixture. Symmetric
    around zero by construction.
    """

    p: int
    normal_scale: float
    trunc_scales: tuple[float, ...]
    thresholds: tuple[float, ...]
    draws: int = DEFAULT_LAW_DRAWS
    seed: int = 0

    @staticmethod
    def overall(
        r2: float, p: int, a: float, draws: int = DEFAULT_LAW_DRAWS, seed: int = 0
    ) -> "TruncatedGaussianLaw":
        """Standardized law sqrt(1 - r2) * eps0 + sqrt(r2) * L with threshold a."""
        if not (0.0 <= r2 <= 1.0):
            raise DomainError(f"r2 must lie in [0, 1], got {r2}")
        return TruncatedGaussianLaw(
            p=p,
            normal_scale=math.sqrt(1.0 - r2),
            trunc_scales=(math.sqrt(r2),),
            thresholds=(a,),
            draws=draws,
            seed=seed,
        )

    @staticmethod
    def mixture(
        weights,
        r2s,
        p: int,
        thresholds,
        draws: int = DEFAULT_LAW_DRAWS,
        seed: int = 0,
    ) -> "TruncatedGaussianLaw":
        """Per-stratum mixture with component variances weights[k].

        The normal component collects sum_k w_k (1 - r2_k); each stratum
        contributes an independent truncated coordinate scaled by
        sqrt(w_k r2_k).
        """
        w = np.asarray(weights, dtype=float)
        r2 = np.asarray(r2s, dtype=float)
        a = tuple(float(t) for t in thresholds)
        if np.any(w < 0):
            raise DomainError("mixture weights must be nonnegative")
        if np.any((r2 < 0) | (r2 > 1)):
            raise DomainError("r2 values must lie in [0, 1]")
        if len(a) != w.size or r2.size != w.size:
            raise DomainError("weights, r2s, and thresholds must have equal length")
        return TruncatedGaussianLaw(
            p=p,
            normal_scale=math.sqrt(float(w @ (1.0 - r2))),
            trunc_scales=tuple(math.sqrt(float(wk * rk)) for wk, rk in zip(w, r2)),
            thresholds=a,
            draws=draws,
            seed=seed,
        )

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        out = self.normal_scale * rng.standard_normal(size)
        for scale, a in zip(self.trunc_scales, self.thresholds):
            if scale > 0.0:
                out += scale * sample_L_pa_many(self.p, a, size, rng)
        return out


@dataclass(frozen=True)
class QuantileEstimate:
    xi: float
    value: float
    mc_se: float


def nu_quantiles(law: TruncatedGaussianLaw, xis) -> list[QuantileEstimate]:
    """Monte Carlo quantiles of the law, deterministic given law.seed.

    All requested quantiles come from one common sample so that interval
    length is monotone in the confidence level. The standard error is the
    half-width of the one-sigma order-statistic band.
    """
    rng = rng_from(law.seed, LANE_LAW)
    sample = law.sample(rng, law.draws)
    out = []
    n = law.draws
    for xi in xis:
        if not (0.0 < xi < 1.0):
            raise DomainError(f"quantile level must be in (0, 1), got {xi}")
        value = float(np.quantile(sample, xi))
        delta = math.sqrt(xi * (1.0 - xi) / n)
        lo = max(1.0 / n, xi - delta)
        hi = min(1.0 - 1.0 / n, xi + delta)
        band = np.quantile(sample, [lo, hi])
        out.append(QuantileEstimate(xi=xi, value=value, mc_se=float(band[1] - band[0]) / 2.0))
    return out


def nu_quantile(law: TruncatedGaussianLaw, xi: float) -> QuantileEstimate:
    """The xi-th Monte Carlo quantile of the law, with its standard error."""
    return nu_quantiles(law, [xi])[0]


# ---------------------------------------------------------------------------
# Variance estimators
# ---------------------------------------------------------------------------


def _arm_moments(x: np.ndarray, y: np.ndarray):
    """Sample variance of y and covariance vector between x columns and y."""
    n = y.shape[0]
    yc = y - y.mean()
    xc = x - x.mean(axis=0)
    s2 = float(yc @ yc) / (n - 1)
    sxy = xc.T @ yc / (n - 1)
    return s2, sxy


@dataclass
class OverallEstimates:
    sigma_tt: float
    sigma_tx: np.ndarray
    r2: float
    r2_clipped: bool


def overall_variance_estimators(
    pop: StratifiedPopulation,
    dm: DesignMatrices,
    assignment: Assignment,
    outcomes: np.ndarray | None = None,
) -> OverallEstimates:
    """Arm-sample plug-ins for the estimator variance and squared correlation.

    Requires at least two units per arm per stratum. The squared correlation
    estimate is clipped to [0, 1]; clipping is flagged so reports can say so.
    """
    y = observed_outcomes(pop, assignment) if outcomes is None else outcomes
    pi = pop.weights
    props = pop.propensities
    x = pop.covariates
    sigma_tt = 0.0
    sigma_tx = np.zeros(pop.p)
    for k in range(pop.k):
        treated, control = arm_indices(pop, assignment, k)
        if treated.size < 2:
            raise InsufficientArm(k, 1)
        if control.size < 2:
            raise InsufficientArm(k, 0)
        s2y1, sxy1 = _arm_moments(x[treated], y[treated])
        s2y0, sxy0 = _arm_moments(x[control], y[control])
        sigma_tt += pi[k] * (s2y1 / props[k] + s2y0 / (1.0 - props[k]))
        sigma_tx += pi[k] * (sxy1 / props[k] + sxy0 / (1.0 - props[k]))
    if sigma_tt <= 0.0:
        return OverallEstimates(sigma_tt=max(sigma_tt, 0.0), sigma_tx=sigma_tx, r2=0.0, r2_clipped=False)
    raw = numeric.quad_form_inv(dm.overall_factor(), sigma_tx) / sigma_tt
    r2 = min(max(raw, 0.0), 1.0)
    return OverallEstimates(
        sigma_tt=float(sigma_tt), sigma_tx=sigma_tx, r2=float(r2), r2_clipped=bool(raw > 1.0)
    )


@dataclass
class StratumEstimates:
    s2_tau_given_x: float
    sigma_tt: float
    r2: float
    sigma_floored: bool
    r2_clipped: bool
    projection_guarded: bool


def stratum_variance_estimators(
    pop: StratifiedPopulation,
    dm: DesignMatrices,
    assignment: Assignment,
    k: int,
    outcomes: np.ndarray | None = None,
) -> StratumEstimates:
    """Stratum-level plug-ins for the stratum-specific criterion.

    s2_tau_given_x is the estimated variance of the linear projection of the
    unit effect on the covariates; the stratum variance subtracts it and is
    floored at zero (flagged). The stratum squared correlation is set to 0
    when its raw value is negative, as the estimator prescribes, and clipped
    at 1 (flagged).

    The projection terms are quadratic forms of arm-sample covariance vectors
    and overfit badly when the covariate dimension approaches the arm size
    (the subtraction then eats the whole variance and intervals collapse), so
    they are only applied when each arm leaves at least 2p degrees of
    freedom; below that the estimator skips the subtraction, which is
    strictly more conservative, and reports projection_guarded.
    """
    y = observed_outcomes(pop, assignment) if outcomes is None else outcomes
    x = pop.covariates
    pk = pop.propensities[k]
    treated, control = arm_indices(pop, assignment, k)
    if treated.size < 2:
        raise InsufficientArm(k, 1)
    if control.size < 2:
        raise InsufficientArm(k, 0)
    s2y1, sxy1 = _arm_moments(x[treated], y[treated])
    s2y0, sxy0 = _arm_moments(x[control], y[control])
    guarded = min(treated.size, control.size) - 1 < 2 * pop.p
    if guarded:
        sigma_tt = s2y1 / pk + s2y0 / (1.0 - pk)
        return StratumEstimates(
            s2_tau_given_x=0.0,
            sigma_tt=float(max(sigma_tt, 0.0)),
            r2=0.0,
            sigma_floored=False,
            r2_clipped=False,
            projection_guarded=True,
        )
    factor = dm.stratum_factor(k)
    pq = pk * (1.0 - pk)
    # Quadratic forms in S_kXX^{-1} reuse the Sigma_kxx factor: S_kXX = pq * Sigma_kxx.
    diff = sxy1 - sxy0
    s2_tau_x = numeric.quad_form_inv(factor, diff) / pq
    raw_sigma = s2y1 / pk + s2y0 / (1.0 - pk) - s2_tau_x
    sigma_tt = max(raw_sigma, 0.0)
    s2y1_x = numeric.quad_form_inv(factor, sxy1) / pq
    s2y0_x = numeric.quad_form_inv(factor, sxy0) / pq
    numer = s2y1_x / pk + s2y0_x / (1.0 - pk) - s2_tau_x
    if sigma_tt <= 0.0 or numer <= 0.0:
        r2, clipped = 0.0, False
    else:
        raw_r2 = numer / sigma_tt
        r2 = min(raw_r2, 1.0)
        clipped = raw_r2 > 1.0
    return StratumEstimates(
        s2_tau_given_x=float(s2_tau_x),
        sigma_tt=float(sigma_tt),
        r2=float(r2),
        sigma_floored=bool(raw_sigma < 0.0),
        r2_clipped=bool(clipped),
        projection_guarded=False,
    )


# ---------------------------------------------------------------------------
# Confidence intervals
# ---------------------------------------------------------------------------


@dataclass
class InferenceReport:
    tau_hat: float
    method: str
    variance_estimate: float
    r2_estimate: float | list[float] | None
    ci_lower: float
    ci_upper: float
    alpha: float
    v: float | list[float] | None
    thresholds: list[float] | None
    metadata: dict = field(default_factory=dict)


def ci_sr(
    pop: StratifiedPopulation,
    dm: DesignMatrices,
    assignment: Assignment,
    alpha: float = 0.05,
    outcomes: np.ndarray | None = None,
) -> InferenceReport:
    """Normal-quantile interval with the conservative pooled variance."""
    y = observed_outcomes(pop, assignment) if outcomes is None else outcomes
    tau = stratified_diff_in_means(pop, assignment, outcomes=y)
    est = overall_variance_estimators(pop, dm, assignment, outcomes=y)
    z = numeric.normal_quantile(1.0 - alpha / 2.0)
    half = math.sqrt(est.sigma_tt / pop.n) * z
    return InferenceReport(
        tau_hat=tau,
        method="sr",
        variance_estimate=est.sigma_tt,
        r2_estimate=None,
        ci_lower=tau - half,
        ci_upper=tau + half,
        alpha=alpha,
        v=None,
        thresholds=None,
        metadata={"r2_clipped": est.r2_clipped},
    )


def ci_srrom(
    pop: StratifiedPopulation,
    dm: DesignMatrices,
    assignment: Assignment,
    a: float,
    alpha: float = 0.05,
    draws: int = DEFAULT_LAW_DRAWS,
    seed: int = 0,
    outcomes: np.ndarray | None = None,
    r2_override: float | None = None,
) -> InferenceReport:
    """Conservative interval under the overall criterion with threshold ``a``.

    ``r2_override`` substitutes a fixed squared correlation for the estimated
    one (a diagnostic knob; 0 recovers the plain normal interval).
    """
    y = observed_outcomes(pop, assignment) if outcomes is None else outcomes
    tau = stratified_diff_in_means(pop, assignment, outcomes=y)
    est = overall_variance_estimators(pop, dm, assignment, outcomes=y)
    r2 = est.r2 if r2_override is None else float(r2_override)
    if not (0.0 <= r2 <= 1.0):
        raise DomainError(f"r2 override must lie in [0, 1], got {r2}")
    v = v_pa(pop.p, a)
    variance = est.sigma_tt * (1.0 - (1.0 - v) * r2)
    law = TruncatedGaussianLaw.overall(r2, pop.p, a, draws=draws, seed=seed)
    quts = nu_quantiles(law, [alpha / 2.0, 1.0 - alpha / 2.0])
    scale = math.sqrt(est.sigma_tt / pop.n)
    return InferenceReport(
        tau_hat=tau,
        method="srrom",
        variance_estimate=variance,
        r2_estimate=r2,
        ci_lower=tau - scale * quts[1].value,
        ci_upper=tau - scale * quts[0].value,
        alpha=alpha,
        v=v,
        thresholds=[a],
        metadata={
            "r2_clipped": est.r2_clipped,
            "r2_overridden": r2_override is not None,
            "law_draws": draws,
            "law_seed": seed,
            "quantile_mc_se": [quts[0].mc_se, quts[1].mc_se],
        },
    )


def ci_srrsm(
    pop: StratifiedPopulation,
    dm: DesignMatrices,
    assignment: Assignment,
    thresholds,
    alpha: float = 0.05,
    draws: int = DEFAULT_LAW_DRAWS,
    seed: int = 0,
    outcomes: np.ndarray | None = None,
) -> InferenceReport:
    """Conservative interval under the stratum-specific criterion."""
    y = observed_outcomes(pop, assignment) if outcomes is None else outcomes
    thresholds = [float(t) for t in thresholds]
    if len(thresholds) != pop.k:
        raise DomainError(f"need one threshold per stratum ({pop.k}), got {len(thresholds)}")
    tau = stratified_diff_in_means(pop, assignment, outcomes=y)
    pi = pop.weights
    ests = [
        stratum_variance_estimators(pop, dm, assignment, k, outcomes=y) for k in range(pop.k)
    ]
    weights = np.array([pi[k] * ests[k].sigma_tt for k in range(pop.k)])
    r2s = np.array([e.r2 for e in ests])
    vs = [v_pa(pop.p, t) for t in thresholds]
    variance = float(
        sum(w * (1.0 - (1.0 - v) * r2) for w, v, r2 in zip(weights, vs, r2s))
    )
    law = TruncatedGaussianLaw.mixture(
        weights, r2s, pop.p, thresholds, draws=draws, seed=seed
    )
    quts = nu_quantiles(law, [alpha / 2.0, 1.0 - alpha / 2.0])
    scale = 1.0 / math.sqrt(pop.n)
    return InferenceReport(
        tau_hat=tau,
        method="srrsm",
        variance_estimate=variance,
        r2_estimate=[float(r) for r in r2s],
        ci_lower=tau - scale * quts[1].value,
        ci_upper=tau - scale * quts[0].value,
        alpha=alpha,
        v=[float(v) for v in vs],
        thresholds=thresholds,
        metadata={
            "sigma_floored": [e.sigma_floored for e in ests],
            "r2_clipped": [e.r2_clipped for e in ests],
            "projection_guarded": [e.projection_guarded for e in ests],
            "law_draws": draws,
            "law_seed": seed,
            "quantile_mc_se": [quts[0].mc_se, quts[1].mc_se],
        },
    )


def analyze_assignment(
    pop: StratifiedPopulation,
    dm: DesignMatrices,
    assignment: Assignment,
    criterion: BalanceCriterion,
    alpha: float = 0.05,
    draws: int = DEFAULT_LAW_DRAWS,
    seed: int = 0,
    outcomes: np.ndarray | None = None,
    r2_override: float | None = None,
) -> InferenceReport:
    """Dispatch to the interval matching the design criterion."""
    if criterion.variant is Variant.SR:
        return ci_sr(pop, dm, assignment, alpha=alpha, outcomes=outcomes)
    if r2_override is not None and criterion.variant is not Variant.SRROM:
        raise DomainError("the r2 override applies only to the overall criterion")
    if criterion.variant is Variant.SRROM:
        return ci_srrom(
            pop, dm, assignment, criterion.thresholds[0],
            alpha=alpha, draws=draws, seed=seed, outcomes=outcomes,
            r2_override=r2_override,
        )
    if criterion.variant is Variant.SRRSM:
        return ci_srrsm(
            pop, dm, assignment, criterion.thresholds,
            alpha=alpha, draws=draws, seed=seed, outcomes=outcomes,
        )
    raise DomainError(
        "no confidence interval is defined under the pooled difference-in-means"
        " criterion (the estimator is biased there); analyze as srrom instead"
    )


# ---------------------------------------------------------------------------
# Oracles over full potential outcomes
# ---------------------------------------------------------------------------


@dataclass
class TheoreticalVariances:
    sigma_tt: float
    sigma_tx: np.ndarray
    r2: float
    stratum_sigma_tt: np.ndarray
    stratum_r2: np.ndarray
    v_overall: float
    v_strata: np.ndarray
    var_sr: float
    var_srrom: float
    var_srrsm: float
    reduction_srrom: float
    reduction_srrsm: float


def theoretical_variances(
    pop: StratifiedPopulation,
    dm: DesignMatrices,
    pa_overall: float = 0.001,
    pa_strata=None,
) -> TheoreticalVariances:
    """Finite-population variances and reductions from full potential outcomes.

    Requires both potential outcomes (simulation or oracle mode). The
    stratum-specific variant's thresholds default to the overall target in
    every stratum; pass ``pa_strata`` (scalar or per-stratum) to override.
    """
    if not pop.has_potentials():
        raise MissingPotentialOutcomes("theoretical_variances needs both potential outcomes")
    p = pop.p
    pi = pop.weights
    props = pop.propensities
    x = pop.covariates
    tau_units = pop.y1 - pop.y0

    if pa_strata is None:
        pa_strata = pa_overall
    if np.isscalar(pa_strata):
        pa_strata = np.full(pop.k, float(pa_strata))
    else:
        pa_strata = np.asarray(pa_strata, dtype=float)
        if pa_strata.shape != (pop.k,):
            raise DomainError(f"pa_strata must have one entry per stratum ({pop.k})")

    a_overall = (
        math.inf if pa_overall >= 1.0 else numeric.chi2_quantile(p, pa_overall)
    )
    a_strata = np.array(
        [math.inf if t >= 1.0 else numeric.chi2_quantile(p, t) for t in pa_strata]
    )
    v_overall = v_pa(p, a_overall)
    v_strata = np.array([v_pa(p, a) for a in a_strata])

    sigma_tt = 0.0
    sigma_tx = np.zeros(p)
    stratum_sigma_tt = np.zeros(pop.k)
    stratum_r2 = np.zeros(pop.k)
    stratum_tx = np.zeros((pop.k, p))
    for k, idx in enumerate(pop.strata):
        s2y1, sxy1 = _arm_moments(x[idx], pop.y1[idx])
        s2y0, sxy0 = _arm_moments(x[idx], pop.y0[idx])
        s2tau, _ = _arm_moments(x[idx], tau_units[idx])
        sig_k = s2y1 / props[k] + s2y0 / (1.0 - props[k]) - s2tau
        tx_k = sxy1 / props[k] + sxy0 / (1.0 - props[k])
        stratum_sigma_tt[k] = sig_k
        stratum_tx[k] = tx_k
        sigma_tt += pi[k] * sig_k
        sigma_tx += pi[k] * tx_k
        if sig_k > 0.0:
            stratum_r2[k] = numeric.quad_form_inv(dm.stratum_factor(k), tx_k) / sig_k
    r2 = (
        numeric.quad_form_inv(dm.overall_factor(), sigma_tx) / sigma_tt
        if sigma_tt > 0.0
        else 0.0
    )

    var_srrom = sigma_tt * (1.0 - (1.0 - v_overall) * r2)
    var_srrsm = float(
        np.sum(pi * stratum_sigma_tt * (1.0 - (1.0 - v_strata) * stratum_r2))
    )
    reduction_srrsm = (
        float(np.sum(pi * stratum_sigma_tt * (1.0 - v_strata) * stratum_r2)) / sigma_tt
        if sigma_tt > 0.0
        else 0.0
    )
    return TheoreticalVariances(
        sigma_tt=sigma_tt,
        sigma_tx=sigma_tx,
        r2=r2,
        stratum_sigma_tt=stratum_sigma_tt,
        stratum_r2=stratum_r2,
        v_overall=v_overall,
        v_strata=v_strata,
        var_sr=sigma_tt,
        var_srrom=var_srrom,
        var_srrsm=var_srrsm,
        reduction_srrom=(1.0 - v_overall) * r2,
        reduction_srrsm=reduction_srrsm,
    )


@dataclass
class SrrdmBias:
    bias: float
    mc_se: float
    acceptance: float
    noncentrality: float


def srrdm_bias(
    pop: StratifiedPopulation,
    dm: DesignMatrices,
    a: float,
    mc_draws: int = 100_000,
    rng: np.random.Generator | None = None,
) -> SrrdmBias:
    """Asymptotic bias of sqrt(n) (tau_hat - tau) under the pooled criterion.

    With C the Cholesky factor of U_xx and D ~ N(C^{-1} omega, I), the bias is
    (C^{-1} U_xtau)^T { E(D | D^T D < a) - C^{-1} omega }: the truncation of a
    noncentered normal shifts the conditional mean away from its unconditional
    value, and the projection of the outcome on the pooled covariate
    difference picks that shift up. (The conditional mean is estimated by
    rejection Monte Carlo with ``mc_draws`` accepted samples; the acceptance
    probability estimate doubles as the noncentral chi-square probability of
    the criterion.)
    """
    if not pop.has_potentials():
        raise MissingPotentialOutcomes("srrdm_bias needs both potential outcomes")
    if rng is None:
        rng = rng_from(0, LANE_LAW, 1)
    p = pop.p
    pi = pop.weights
    props = pop.propensities
    p1 = dm.p1
    p0 = 1.0 - p1
    x = pop.covariates
    u_xtau = np.zeros(p)
    for k, idx in enumerate(pop.strata):
        _, sxy1 = _arm_moments(x[idx], pop.y1[idx])
        _, sxy0 = _arm_moments(x[idx], pop.y0[idx])
        u_xtau += pi[k] * ((1.0 - props[k]) * sxy1 + props[k] * sxy0) / (p1 * p0)
    factor = dm.u_factor()
    mu = numeric.solve_lower(factor, dm.omega)
    w = numeric.solve_lower(factor, u_xtau)
    noncentrality = float(mu @ mu)

    accepted = 0
    total = 0
    sum_w_d = 0.0
    sum_w_d_sq = 0.0
    batch = 65_536
    max_total = max(10_000_000, 200 * mc_draws)
    while accepted < mc_draws and total < max_total:
        d = mu + rng.standard_normal((batch, p))
        keep = np.einsum("ij,ij->i", d, d) < a
        total += batch
        vals = d[keep] @ w
        accepted += vals.size
        sum_w_d += float(vals.sum())
        sum_w_d_sq += float(vals @ vals)
    if accepted == 0:
        raise DomainError(
            f"no draws satisfied the criterion after {total} proposals; threshold too small"
        )
    mean_w_d = sum_w_d / accepted
    var_w_d = max(sum_w_d_sq / accepted - mean_w_d**2, 0.0)
    bias = mean_w_d - float(w @ mu)
    if float(np.max(np.abs(w))) == 0.0:
        bias = 0.0
    return SrrdmBias(
        bias=bias,
        mc_se=math.sqrt(var_w_d / accepted),
        acceptance=accepted / total,
        noncentrality=noncentrality,
    )
