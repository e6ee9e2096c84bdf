"""Configurable replication studies over the four benchmark designs.

A study fixes one population (covariates and both potential outcomes), then
repeatedly assigns treatment under each method, estimates the effect, and
builds the matching confidence interval. Metrics follow the usual columns:
bias, standard deviation, RMSE, mean interval length, and empirical coverage.
"""

from __future__ import annotations

import concurrent.futures
import enum
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import numeric
from .balance import (
    BalanceCriterion,
    Variant,
    build_design_matrices,
    rerandomize,
)
from .design import StratifiedPopulation
from .errors import DomainError, RestratError
from .inference import (
    overall_variance_estimators,
    sample_L_pa_many,
    stratified_diff_in_means,
    stratum_variance_estimators,
    v_pa,
)
from .rng import LANE_LAW, LANE_POPULATION, LANE_REPLICATION, rng_from

__all__ = [
    "Case",
    "PropensityMode",
    "DgpConfig",
    "ReplicationMetrics",
    "StudyResult",
    "generate_population",
    "run_study",
    "run_study_population",
    "metrics_table_text",
    "default_thread_count",
]

THREADS_ENV_VAR = "RESTRAT_THREADS"


class Case(str, enum.Enum):
    MANY_SMALL = "many_small"
    MANY_SMALL_PLUS_TWO_LARGE = "many_small_plus_two_large"
    TWO_LARGE_HOMOGENEOUS = "two_large_homogeneous"
    TWO_LARGE_HETEROGENEOUS = "two_large_heterogeneous"


class PropensityMode(str, enum.Enum):
    EQUAL = "equal"          # p_k = 0.5 everywhere
    UNEQUAL = "unequal"      # 0.4 for the first half of the strata, 0.6 after


@dataclass(frozen=True)
class DgpConfig:
    """Data-generating settings for one benchmark population.

    The four cases fix the stratum structure: many small strata; many small
    plus two large; two large strata sharing one coefficient draw; and two
    large strata with coefficients drawn independently per stratum.
    ``stratum_sizes`` may be given explicitly; otherwise it derives from the
    case, ``k``, and ``large_size`` / ``small_size``.

    ``linear_outcomes`` zeroes the coefficients inside the exponential term,
    leaving a purely linear outcome model.
    """

    case: Case = Case.TWO_LARGE_HOMOGENEOUS
    k: int = 2
    small_size: int = 10
    large_size: int = 100
    stratum_sizes: tuple[int, ...] | None = None
    propensity_mode: PropensityMode = PropensityMode.EQUAL
    p: int = 8
    noise_var: float = 10.0
    linear_outcomes: bool = False
    seed: int = 0

    def sizes(self) -> tuple[int, ...]:
        if self.stratum_sizes is not None:
            return tuple(int(s) for s in self.stratum_sizes)
        if self.case is Case.MANY_SMALL:
            return (self.small_size,) * self.k
        if self.case is Case.MANY_SMALL_PLUS_TWO_LARGE:
            if self.k < 3:
                raise DomainError("many_small_plus_two_large needs k >= 3")
            return (self.small_size,) * (self.k - 2) + (self.large_size, self.large_size)
        return (self.large_size,) * 2

    def propensities(self, n_strata: int) -> tuple[float, ...]:
        if self.propensity_mode is PropensityMode.EQUAL:
            return (0.5,) * n_strata
        half = n_strata // 2
        return (0.4,) * half + (0.6,) * (n_strata - half)


def paper_case(
    case: Case, k: int | None = None, stratum_size: int | None = None,
    propensity_mode: PropensityMode = PropensityMode.EQUAL, seed: int = 0,
) -> DgpConfig:
    """The benchmark settings at published scale for the given case."""
    if case is Case.MANY_SMALL:
        return DgpConfig(case=case, k=k or 50, small_size=10,
                         propensity_mode=propensity_mode, seed=seed)
    if case is Case.MANY_SMALL_PLUS_TWO_LARGE:
        return DgpConfig(case=case, k=(k or 20) + 2, small_size=10, large_size=100,
                         propensity_mode=propensity_mode, seed=seed)
    return DgpConfig(case=case, k=2, large_size=stratum_size or 100,
                     propensity_mode=propensity_mode, seed=seed)


def _ar1_cholesky(p: int) -> np.ndarray:
    rho = 0.5
    cov = rho ** np.abs(np.subtract.outer(np.arange(p), np.arange(p)))
    return numeric.cholesky(cov)


def _t3(rng: np.random.Generator, size) -> np.ndarray:
    """t with three degrees of freedom as normal over sqrt(chi2_3 / 3)."""
    shape = (size,) if np.isscalar(size) else tuple(size)
    z = rng.standard_normal(shape)
    chi = rng.standard_normal(shape + (3,))
    return z / np.sqrt((chi * chi).sum(axis=-1) / 3.0)


def _draw_coefficients(rng: np.random.Generator, p: int):
    b11 = _t3(rng, p)
    b12 = 0.1 * _t3(rng, p)
    b01 = b11 + _t3(rng, p)
    b02 = b12 + 0.1 * _t3(rng, p)
    return b11, b12, b01, b02


def generate_population(cfg: DgpConfig) -> StratifiedPopulation:
    """Realize one fixed population: covariates and both potential outcomes.

    Covariates are mean-zero normal with AR(1) correlation 0.5^|i-j|; outcomes
    are a linear term plus an exponential term plus homoskedastic noise, with
    coefficient vectors drawn once (or once per stratum in the heterogeneous
    case) from scaled t3 laws.
    """
    sizes = cfg.sizes()
    n = int(sum(sizes))
    rng = rng_from(cfg.seed, LANE_POPULATION)
    chol = _ar1_cholesky(cfg.p)
    x = rng.standard_normal((n, cfg.p)) @ chol.T
    sd = math.sqrt(cfg.noise_var)

    bounds = np.cumsum((0,) + sizes)
    strata = tuple(np.arange(bounds[k], bounds[k + 1]) for k in range(len(sizes)))

    y1 = np.empty(n)
    y0 = np.empty(n)
    if cfg.case is Case.TWO_LARGE_HETEROGENEOUS:
        for idx in strata:
            b11, b12, b01, b02 = _draw_coefficients(rng, cfg.p)
            if cfg.linear_outcomes:
                b12 = np.zeros_like(b12)
                b02 = np.zeros_like(b02)
            xk = x[idx]
            y1[idx] = xk @ b11 + np.exp(xk @ b12)
            y0[idx] = xk @ b01 + np.exp(xk @ b02)
    else:
        b11, b12, b01, b02 = _draw_coefficients(rng, cfg.p)
        if cfg.linear_outcomes:
            b12 = np.zeros_like(b12)
            b02 = np.zeros_like(b02)
        y1[:] = x @ b11 + np.exp(x @ b12)
        y0[:] = x @ b01 + np.exp(x @ b02)
    y1 += sd * rng.standard_normal(n)
    y0 += sd * rng.standard_normal(n)

    return StratifiedPopulation(
        covariates=x,
        strata=strata,
        propensities=np.array(cfg.propensities(len(sizes))),
        y1=y1,
        y0=y0,
    )


@dataclass
class ReplicationMetrics:
    method: str
    reps: int
    bias: float
    sd: float
    rmse: float
    mean_ci_length: float
    coverage: float
    fallback_count: int
    error_count: int
    mean_attempts: float

    def row(self) -> dict:
        return {
            "method": self.method,
            "reps": self.reps,
            "bias": self.bias,
            "sd": self.sd,
            "rmse": self.rmse,
            "ci_length": self.mean_ci_length,
            "cp_percent": 100.0 * self.coverage,
            "fallbacks": self.fallback_count,
            "errors": self.error_count,
            "mean_attempts": self.mean_attempts,
        }


@dataclass
class StudyResult:
    tau: float
    alpha: float
    reps: int
    seed: int
    metrics: list[ReplicationMetrics]
    samples: dict[str, np.ndarray] = field(default_factory=dict)
    manifest: dict = field(default_factory=dict)


class _LawBase:
    """Per-method common random numbers for interval quantiles.

    One base sample of the normal component and of each truncated component
    is drawn per method and reused across replications; per replication the
    components are rescaled by the estimated weights. Quantile Monte Carlo
    noise is then shared across replications instead of redrawn.
    """

    def __init__(self, p, thresholds, draws, rng):
        self.eps = rng.standard_normal(draws)
        self.l_parts = np.stack(
            [sample_L_pa_many(p, a, draws, rng) for a in thresholds], axis=0
        )

    def quantile_pair(self, normal_scale, trunc_scales, alpha):
        combo = normal_scale * self.eps
        for scale, part in zip(trunc_scales, self.l_parts):
            if scale > 0.0:
                combo = combo + scale * part
        lo, hi = np.quantile(combo, [alpha / 2.0, 1.0 - alpha / 2.0])
        return float(lo), float(hi)


def default_thread_count() -> int:
    value = os.environ.get(THREADS_ENV_VAR, "1")
    try:
        return max(1, int(value))
    except ValueError:
        return 1


def run_study_population(
    pop: StratifiedPopulation,
    methods: list[BalanceCriterion],
    reps: int,
    alpha: float = 0.05,
    seed: int = 0,
    law_draws: int = 100_000,
    threads: int | None = None,
    enum_cap: int = 4096,
) -> StudyResult:
    """Replication engine over a fixed population.

    Deterministic given (seed, reps) regardless of thread count: replication
    r of method m always draws from the stream (seed, replication-lane, m, r),
    and results land in position r of a preallocated record array.
    """
    if not pop.has_potentials():
        raise DomainError("run_study needs a population with potential outcomes")
    dm = build_design_matrices(pop)
    tau = float(np.mean(pop.y1 - pop.y0))
    z_normal = numeric.normal_quantile(1.0 - alpha / 2.0)
    threads = threads or default_thread_count()

    metrics = []
    samples = {}
    for m_idx, crit in enumerate(methods):
        base = None
        vs = None
        if crit.variant in (Variant.SRROM, Variant.SRRSM):
            base = _LawBase(
                pop.p, crit.thresholds, law_draws, rng_from(seed, LANE_LAW, m_idx)
            )
            vs = [v_pa(pop.p, a) for a in crit.thresholds]

        tau_err = np.full(reps, np.nan)
        ci_len = np.full(reps, np.nan)
        covered = np.zeros(reps, dtype=bool)
        fell_back = np.zeros(reps, dtype=bool)
        attempts = np.zeros(reps, dtype=np.int64)
        failed = np.zeros(reps, dtype=bool)

        def one_rep(r, crit=crit, m_idx=m_idx, base=base, vs=vs):
            rng = rng_from(seed, LANE_REPLICATION, m_idx, r)
            result = rerandomize(pop, dm, crit, rng, enum_cap=enum_cap)
            assignment = result.assignment
            y = np.where(assignment.z == 1, pop.y1, pop.y0)
            that = stratified_diff_in_means(pop, assignment, outcomes=y)
            if crit.variant in (Variant.SR, Variant.SRRDM):
                est = overall_variance_estimators(pop, dm, assignment, outcomes=y)
                half = math.sqrt(est.sigma_tt / pop.n) * z_normal
                lo, hi = that - half, that + half
            elif crit.variant is Variant.SRROM:
                est = overall_variance_estimators(pop, dm, assignment, outcomes=y)
                qlo, qhi = base.quantile_pair(
                    math.sqrt(1.0 - est.r2), [math.sqrt(est.r2)], alpha
                )
                scale = math.sqrt(est.sigma_tt / pop.n)
                lo, hi = that - scale * qhi, that - scale * qlo
            else:
                pi = pop.weights
                w = np.empty(pop.k)
                r2 = np.empty(pop.k)
                for k in range(pop.k):
                    e = stratum_variance_estimators(pop, dm, assignment, k, outcomes=y)
                    w[k] = pi[k] * e.sigma_tt
                    r2[k] = e.r2
                normal_scale = math.sqrt(float(w @ (1.0 - r2)))
                trunc_scales = np.sqrt(w * r2)
                qlo, qhi = base.quantile_pair(normal_scale, trunc_scales, alpha)
                scale = 1.0 / math.sqrt(pop.n)
                lo, hi = that - scale * qhi, that - scale * qlo
            tau_err[r] = that - tau
            ci_len[r] = hi - lo
            covered[r] = lo <= tau <= hi
            fell_back[r] = result.fell_back
            attempts[r] = result.attempts

        def run_range(r0, r1):
            for r in range(r0, r1):
                try:
                    one_rep(r)
                except RestratError:
                    failed[r] = True

        if threads > 1:
            chunk = max(1, reps // (threads * 4))
            with concurrent.futures.ThreadPoolExecutor(max_workers=threads) as pool:
                futures = [
                    pool.submit(run_range, r0, min(r0 + chunk, reps))
                    for r0 in range(0, reps, chunk)
                ]
                for f in futures:
                    f.result()
        else:
            run_range(0, reps)

        ok = ~failed
        err = tau_err[ok]
        n_ok = int(ok.sum())
        bias = float(err.mean()) if n_ok else math.nan
        msq = float(np.mean(err * err)) if n_ok else math.nan
        rmse = math.sqrt(msq) if n_ok else math.nan
        # sd from (msq, bias) keeps the rmse identity exact in float arithmetic.
        sd = math.sqrt(max(msq - bias * bias, 0.0) * n_ok / (n_ok - 1)) if n_ok > 1 else math.nan
        metrics.append(
            ReplicationMetrics(
                method=crit.label or crit.variant.value,
                reps=n_ok,
                bias=bias,
                sd=sd,
                rmse=rmse,
                mean_ci_length=float(ci_len[ok].mean()) if n_ok else math.nan,
                coverage=float(covered[ok].mean()) if n_ok else math.nan,
                fallback_count=int(fell_back[ok].sum()),
                error_count=int(failed.sum()),
                mean_attempts=float(attempts[ok].mean()) if n_ok else math.nan,
            )
        )
        samples[crit.label or crit.variant.value] = tau_err

    manifest = {
        "seed": seed,
        "reps": reps,
        "alpha": alpha,
        "law_draws": law_draws,
        "n": pop.n,
        "strata": [int(s) for s in pop.sizes],
        "propensities": [float(v) for v in pop.propensities],
        "methods": [
            {
                "label": c.label or c.variant.value,
                "variant": c.variant.value,
                "target_acceptance": list(c.target_acceptance) if c.target_acceptance else None,
                "thresholds": list(c.thresholds) if c.thresholds else None,
                "max_attempts": c.max_attempts,
                "fallback": c.fallback.value,
            }
            for c in methods
        ],
    }
    return StudyResult(
        tau=tau, alpha=alpha, reps=reps, seed=seed,
        metrics=metrics, samples=samples, manifest=manifest,
    )


def run_study(
    cfg: DgpConfig,
    methods: list[BalanceCriterion],
    reps: int,
    alpha: float = 0.05,
    seed: int | None = None,
    law_draws: int = 100_000,
    threads: int | None = None,
    redraw_population: bool = False,
) -> StudyResult:
    """Generate the population from ``cfg`` and run the replication study.

    ``redraw_population`` switches to super-population mode: a fresh
    population per replication, each method seeing the same sequence of
    populations. Default is off; the inference framework conditions on one
    fixed set of potential outcomes.
    """
    seed = cfg.seed if seed is None else seed
    if not redraw_population:
        pop = generate_population(cfg)
        result = run_study_population(
            pop, methods, reps, alpha=alpha, seed=seed,
            law_draws=law_draws, threads=threads,
        )
        result.manifest["dgp"] = _dgp_manifest(cfg)
        return result
    return _run_study_redraw(cfg, methods, reps, alpha, seed)


def _run_study_redraw(cfg, methods, reps, alpha, seed) -> StudyResult:
    """Super-population variant: one fresh population per replication.

    Intervals here are the plain normal ones: a redrawn population breaks the
    fixed-potential conditioning the truncated laws are derived under.
    """
    z_normal = numeric.normal_quantile(1.0 - alpha / 2.0)
    records = {
        (m, field_): np.full(reps, np.nan)
        for m in range(len(methods))
        for field_ in ("err", "len")
    }
    covered = {m: np.zeros(reps, dtype=bool) for m in range(len(methods))}
    fell = {m: 0 for m in range(len(methods))}
    for r in range(reps):
        pop = generate_population(_with_seed(cfg, _rep_seed(seed, r)))
        dm = build_design_matrices(pop)
        tau = float(np.mean(pop.y1 - pop.y0))
        for m_idx, crit in enumerate(methods):
            rng = rng_from(seed, LANE_REPLICATION, m_idx, r)
            result = rerandomize(pop, dm, crit, rng)
            y = np.where(result.assignment.z == 1, pop.y1, pop.y0)
            that = stratified_diff_in_means(pop, result.assignment, outcomes=y)
            est = overall_variance_estimators(pop, dm, result.assignment, outcomes=y)
            half = math.sqrt(est.sigma_tt / pop.n) * z_normal
            records[(m_idx, "err")][r] = that - tau
            records[(m_idx, "len")][r] = 2 * half
            covered[m_idx][r] = that - half <= tau <= that + half
            fell[m_idx] += int(result.fell_back)
    metrics = []
    samples = {}
    for m_idx, crit in enumerate(methods):
        err = records[(m_idx, "err")]
        bias = float(err.mean())
        msq = float(np.mean(err * err))
        sd = math.sqrt(max(msq - bias * bias, 0.0) * reps / (reps - 1))
        label = crit.label or crit.variant.value
        metrics.append(
            ReplicationMetrics(
                method=label, reps=reps, bias=bias, sd=sd, rmse=math.sqrt(msq),
                mean_ci_length=float(records[(m_idx, "len")].mean()),
                coverage=float(covered[m_idx].mean()),
                fallback_count=fell[m_idx], error_count=0, mean_attempts=math.nan,
            )
        )
        samples[label] = err
    manifest = {"seed": seed, "reps": reps, "alpha": alpha, "redraw_population": True,
                "dgp": _dgp_manifest(cfg)}
    return StudyResult(tau=math.nan, alpha=alpha, reps=reps, seed=seed,
                       metrics=metrics, samples=samples, manifest=manifest)


def _rep_seed(seed: int, r: int) -> int:
    return (seed * 1_000_003 + r) % (2**63)


def _with_seed(cfg: DgpConfig, seed: int) -> DgpConfig:
    values = {f: getattr(cfg, f) for f in cfg.__dataclass_fields__}
    values["seed"] = seed
    return DgpConfig(**values)


def _dgp_manifest(cfg: DgpConfig) -> dict:
    return {
        "case": cfg.case.value,
        "k": cfg.k,
        "stratum_sizes": list(cfg.sizes()),
        "propensity_mode": cfg.propensity_mode.value,
        "p": cfg.p,
        "noise_var": cfg.noise_var,
        "linear_outcomes": cfg.linear_outcomes,
        "seed": cfg.seed,
    }


def metrics_table_text(result: StudyResult) -> str:
    """Aligned text table with the usual benchmark columns."""
    header = f"{'Method':<14}{'Bias':>10}{'SD':>10}{'RMSE':>10}{'CI length':>12}{'CP (%)':>9}"
    lines = [header, "-" * len(header)]
    for m in result.metrics:
        lines.append(
            f"{m.method:<14}{m.bias:>10.4f}{m.sd:>10.4f}{m.rmse:>10.4f}"
            f"{m.mean_ci_length:>12.4f}{100 * m.coverage:>9.2f}"
        )
    return "\n".join(lines)
