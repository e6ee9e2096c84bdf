"""Design-stage matrices, Mahalanobis balance statistics, and rerandomizers.

All matrices defined here are computable before any outcome is observed:
per-stratum covariate means and covariances, the pooled design covariance of
the stratified covariate difference-in-means, and the corresponding objects
for the pooled (non-stratified) difference-in-means variant.
"""

from __future__ import annotations

import enum
import itertools
import math
from dataclasses import dataclass

import numpy as np

from . import numeric
from .design import Assignment, StratifiedPopulation
from .errors import AttemptsExhausted, DomainError, SingularCovariance, SingularMatrix

__all__ = [
    "DesignMatrices",
    "Variant",
    "Fallback",
    "BalanceCriterion",
    "build_design_matrices",
    "tau_x_hat",
    "tau_x_dm",
    "mahalanobis_overall",
    "mahalanobis_stratum",
    "mahalanobis_dm",
    "threshold_for",
    "fair_stratum_target",
    "rerandomize",
    "RerandomizeResult",
]

ACCEPT_ALL = math.inf


class Variant(str, enum.Enum):
    SR = "sr"
    SRROM = "srrom"
    SRRSM = "srrsm"
    SRRDM = "srrdm"


class Fallback(str, enum.Enum):
    ERROR_OUT = "error"
    FALL_BACK_TO_SR = "sr"


class DesignMatrices:
    """Everything the balance criteria need, computed once per population.

    stratum_means      X_bar_k, shape (K, p)
    stratum_cov        S_kXX with divisor n_k - 1, shape (K, p, p)
    sigma_xx           sum_k pi_k S_kXX / (p_k (1 - p_k))
    stratum_sigma_xx   S_kXX / (p_k (1 - p_k)), shape (K, p, p)
    u_xx               sum_k pi_k p_k (1 - p_k) / (p1^2 p0^2) S_kXX
    omega              sqrt(n) / (p1 p0) sum_k pi_k (p_k - p1) X_bar_k
    p1                 overall treated fraction n1 / n

    Cholesky factors are cached; the factor of sigma_xx is computed eagerly to
    certify positive definiteness at build time.
    """

    def __init__(self, pop: StratifiedPopulation, ridge: float | None = None):
        self.pop = pop
        self.ridge = ridge
        n = pop.n
        p = pop.p
        sizes = pop.sizes
        pi = pop.weights
        props = pop.propensities
        n1 = int(pop.treated_counts.sum())
        self.p1 = n1 / n
        p0 = 1.0 - self.p1

        self.stratum_means = np.empty((pop.k, p))
        self.stratum_cov = np.empty((pop.k, p, p))
        self.stratum_x = []
        self.stratum_sums = np.empty((pop.k, p))
        for k, idx in enumerate(pop.strata):
            xk = pop.covariates[idx]
            self.stratum_x.append(xk)
            self.stratum_sums[k] = xk.sum(axis=0)
            mean = self.stratum_sums[k] / sizes[k]
            self.stratum_means[k] = mean
            centered = xk - mean
            self.stratum_cov[k] = centered.T @ centered / (sizes[k] - 1)

        pq = props * (1.0 - props)
        self.stratum_sigma_xx = self.stratum_cov / pq[:, None, None]
        self.sigma_xx = np.einsum("k,kij->ij", pi, self.stratum_sigma_xx)
        self.u_xx = np.einsum("k,kij->ij", pi * pq / (self.p1**2 * p0**2), self.stratum_cov)
        self.omega = (
            math.sqrt(n) / (self.p1 * p0) * ((pi * (props - self.p1)) @ self.stratum_means)
        )
        if ridge is not None:
            for mat in (self.sigma_xx, self.u_xx):
                mat += ridge * np.mean(np.diag(mat)) * np.eye(p)
            self.stratum_sigma_xx += (
                ridge
                * np.mean(np.diagonal(self.stratum_sigma_xx, axis1=1, axis2=2), axis=1)[
                    :, None, None
                ]
                * np.eye(p)
            )

        self._factors: dict = {}
        try:
            self._factors["overall"] = numeric.cholesky(self.sigma_xx)
        except SingularMatrix as exc:
            raise SingularCovariance(exc.pivot) from exc

    def overall_factor(self) -> np.ndarray:
        return self._factors["overall"]

    def u_factor(self) -> np.ndarray:
        if "u" not in self._factors:
            try:
                self._factors["u"] = numeric.cholesky(self.u_xx)
            except SingularMatrix as exc:
                raise SingularCovariance(exc.pivot) from exc
        return self._factors["u"]

    def stratum_factor(self, k: int) -> np.ndarray:
        """Cholesky factor of Sigma_kxx; SingularCovariance is tagged with k."""
        key = ("stratum", k)
        if key not in self._factors:
            try:
                self._factors[key] = numeric.cholesky(self.stratum_sigma_xx[k])
            except SingularMatrix as exc:
                raise SingularCovariance(exc.pivot, stratum=k) from exc
        return self._factors[key]


def build_design_matrices(
    pop: StratifiedPopulation, ridge: float | None = None
) -> DesignMatrices:
    """Compute all design-stage matrices; fails fast when sigma_xx is singular.

    ``ridge``, when given, adds ridge * mean(diag) * I to the covariance
    blocks; the flag is recorded on the result so reports can disclose it.
    """
    if np.any(pop.sizes < 2):
        small = int(np.argmin(pop.sizes))
        raise DomainError(
            f"stratum {pop.stratum_labels[small]} has fewer than 2 units; S_kXX is undefined"
        )
    return DesignMatrices(pop, ridge=ridge)


# ---------------------------------------------------------------------------
# Balance statistics
# ---------------------------------------------------------------------------


def tau_x_hat(pop: StratifiedPopulation, dm: DesignMatrices, assignment: Assignment) -> np.ndarray:
    """Stratified difference-in-means of the covariates."""
    z = assignment.z
    counts = pop.treated_counts
    sizes = pop.sizes
    pi = pop.weights
    total = np.zeros(pop.p)
    for k, idx in enumerate(pop.strata):
        treated_sum = pop.covariates[idx[z[idx] == 1]].sum(axis=0)
        control_sum = dm.stratum_sums[k] - treated_sum
        n1 = counts[k]
        n0 = sizes[k] - n1
        total += pi[k] * (treated_sum / n1 - control_sum / n0)
    return total


def tau_x_dm(pop: StratifiedPopulation, assignment: Assignment) -> np.ndarray:
    """Pooled difference-in-means of the covariates, ignoring strata."""
    z = assignment.z.astype(bool)
    n1 = int(z.sum())
    n0 = pop.n - n1
    return pop.covariates[z].sum(axis=0) / n1 - pop.covariates[~z].sum(axis=0) / n0


def mahalanobis_overall(dm: DesignMatrices, tx: np.ndarray, n: int) -> float:
    """M = n tx^T sigma_xx^{-1} tx."""
    return n * numeric.quad_form_inv(dm.overall_factor(), tx)


def mahalanobis_stratum(
    pop: StratifiedPopulation, dm: DesignMatrices, assignment: Assignment, k: int
) -> float:
    """M_k = n_k tau_kX^T Sigma_kxx^{-1} tau_kX for stratum k."""
    idx = pop.strata[k]
    z = assignment.z[idx]
    n1 = int(pop.treated_counts[k])
    n0 = idx.size - n1
    treated_sum = pop.covariates[idx[z == 1]].sum(axis=0)
    tx = treated_sum / n1 - (dm.stratum_sums[k] - treated_sum) / n0
    return idx.size * numeric.quad_form_inv(dm.stratum_factor(k), tx)


def mahalanobis_dm(
    pop: StratifiedPopulation, dm: DesignMatrices, assignment: Assignment
) -> float:
    """M = n ttx^T u_xx^{-1} ttx for the pooled difference-in-means ttx."""
    tx = tau_x_dm(pop, assignment)
    return pop.n * numeric.quad_form_inv(dm.u_factor(), tx)


def threshold_for(p: int, target: float) -> float:
    """Threshold a with asymptotic acceptance probability ``target``.

    target = 1 returns the accept-all sentinel (infinity).
    """
    if not (0.0 < target <= 1.0):
        raise DomainError(f"target acceptance must be in (0, 1], got {target}")
    if target == 1.0:
        return ACCEPT_ALL
    return numeric.chi2_quantile(p, target)


def fair_stratum_target(pa: float, k: int) -> float:
    """Per-stratum acceptance target pa^(1/K), equalizing the joint rate."""
    if not (0.0 < pa <= 1.0):
        raise DomainError(f"target acceptance must be in (0, 1], got {pa}")
    return pa ** (1.0 / k)


# ---------------------------------------------------------------------------
# Criteria and the rerandomizer
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BalanceCriterion:
    """A rerandomization acceptance rule.

    variant            SR (no balance check), overall (SRRoM), stratum-specific
                       (SRRsM), or pooled difference-in-means (SRRdM).
    target_acceptance  the acceptance probability the thresholds realize;
                       scalar, or one value per stratum for SRRsM.
    thresholds         a (scalar) or a_k (per stratum); chi-square quantiles of
                       the targets unless supplied directly.
    max_attempts       rejection-sampling budget per draw (per stratum for SRRsM).
    fallback           what to do on exhaustion: raise, or return one plain
                       stratified randomization draw flagged fell_back.
    """

    variant: Variant
    target_acceptance: tuple[float, ...] | None = None
    thresholds: tuple[float, ...] | None = None
    max_attempts: int = 1_000_000
    fallback: Fallback = Fallback.ERROR_OUT
    label: str = ""

    @staticmethod
    def sr(label: str = "SR") -> "BalanceCriterion":
        return BalanceCriterion(variant=Variant.SR, label=label)

    @staticmethod
    def overall(
        p: int,
        pa: float,
        max_attempts: int = 1_000_000,
        fallback: Fallback = Fallback.ERROR_OUT,
        label: str = "SRRoM",
    ) -> "BalanceCriterion":
        return BalanceCriterion(
            variant=Variant.SRROM,
            target_acceptance=(pa,),
            thresholds=(threshold_for(p, pa),),
            max_attempts=max_attempts,
            fallback=fallback,
            label=label,
        )

    @staticmethod
    def stratum_specific(
        p: int,
        pa_k,
        k: int | None = None,
        max_attempts: int = 1_000_000,
        fallback: Fallback = Fallback.FALL_BACK_TO_SR,
        label: str = "SRRsM",
    ) -> "BalanceCriterion":
        """pa_k may be a scalar (shared by all strata, needs ``k``) or a sequence."""
        if np.isscalar(pa_k):
            if k is None:
                raise DomainError("scalar pa_k needs the number of strata k")
            targets = (float(pa_k),) * k
        else:
            targets = tuple(float(v) for v in pa_k)
        thresholds = tuple(threshold_for(p, t) for t in targets)
        return BalanceCriterion(
            variant=Variant.SRRSM,
            target_acceptance=targets,
            thresholds=thresholds,
            max_attempts=max_attempts,
            fallback=fallback,
            label=label,
        )

    @staticmethod
    def diff_in_means(
        p: int,
        pa: float,
        max_attempts: int = 1_000_000,
        fallback: Fallback = Fallback.ERROR_OUT,
        label: str = "SRRdM",
    ) -> "BalanceCriterion":
        return BalanceCriterion(
            variant=Variant.SRRDM,
            target_acceptance=(pa,),
            thresholds=(threshold_for(p, pa),),
            max_attempts=max_attempts,
            fallback=fallback,
            label=label,
        )


@dataclass
class RerandomizeResult:
    assignment: Assignment
    attempts: int
    fell_back: bool
    m_overall: float | None = None
    m_strata: list[float] | None = None
    stratum_attempts: list[int] | None = None
    stratum_modes: list[str] | None = None


def _draw_treated_locals(rng, sizes, counts) -> list[np.ndarray]:
    return [rng.permutation(sizes[k])[: counts[k]] for k in range(len(sizes))]


def _tau_x_from_locals(pop, dm, treated_locals) -> np.ndarray:
    counts = pop.treated_counts
    sizes = pop.sizes
    pi = pop.weights
    total = np.zeros(pop.p)
    for k in range(pop.k):
        treated_sum = dm.stratum_x[k][treated_locals[k]].sum(axis=0)
        control_sum = dm.stratum_sums[k] - treated_sum
        total += pi[k] * (treated_sum / counts[k] - control_sum / (sizes[k] - counts[k]))
    return total


def _tau_x_dm_from_locals(pop, dm, treated_locals) -> np.ndarray:
    counts = pop.treated_counts
    n1 = int(counts.sum())
    n0 = pop.n - n1
    treated = np.zeros(pop.p)
    total = dm.stratum_sums.sum(axis=0)
    for k in range(pop.k):
        treated += dm.stratum_x[k][treated_locals[k]].sum(axis=0)
    return treated / n1 - (total - treated) / n0


def _assignment_from_locals(pop, treated_locals, seed_record=None) -> Assignment:
    z = np.zeros(pop.n, dtype=np.int8)
    for k, idx in enumerate(pop.strata):
        z[idx[treated_locals[k]]] = 1
    return Assignment(z=z, seed_record=seed_record)


def _rerandomize_whole(pop, dm, criterion, rng, seed_record) -> RerandomizeResult:
    """Shared accept/reject loop for the whole-population criteria."""
    a = criterion.thresholds[0]
    sizes = pop.sizes
    counts = pop.treated_counts
    pooled = criterion.variant is Variant.SRRDM
    factor = dm.u_factor() if pooled else dm.overall_factor()
    n = pop.n
    for attempt in range(1, criterion.max_attempts + 1):
        treated_locals = _draw_treated_locals(rng, sizes, counts)
        tx = (
            _tau_x_dm_from_locals(pop, dm, treated_locals)
            if pooled
            else _tau_x_from_locals(pop, dm, treated_locals)
        )
        m = n * numeric.quad_form_inv(factor, tx)
        if m < a:
            record = dict(seed_record or {}, attempts=attempt)
            return RerandomizeResult(
                assignment=_assignment_from_locals(pop, treated_locals, record),
                attempts=attempt,
                fell_back=False,
                m_overall=m,
            )
    if criterion.fallback is Fallback.FALL_BACK_TO_SR:
        treated_locals = _draw_treated_locals(rng, sizes, counts)
        record = dict(seed_record or {}, attempts=criterion.max_attempts, fell_back=True)
        return RerandomizeResult(
            assignment=_assignment_from_locals(pop, treated_locals, record),
            attempts=criterion.max_attempts,
            fell_back=True,
            m_overall=None,
        )
    raise AttemptsExhausted(criterion.max_attempts)


def _stratum_m_values_enumerated(pop, dm, k) -> tuple[np.ndarray, np.ndarray]:
    """All per-stratum M_k values, one row of treated locals per combination."""
    size = int(pop.sizes[k])
    n1 = int(pop.treated_counts[k])
    combos = np.array(list(itertools.combinations(range(size), n1)), dtype=np.intp)
    xk = dm.stratum_x[k]
    treated_sums = xk[combos].sum(axis=1)
    control_sums = dm.stratum_sums[k] - treated_sums
    tx = treated_sums / n1 - control_sums / (size - n1)
    m = size * numeric.quad_form_inv_many(dm.stratum_factor(k), tx)
    return combos, m


def _rerandomize_stratum_specific(
    pop, dm, criterion, rng, seed_record, enum_cap
) -> RerandomizeResult:
    """Independent per-stratum accept/reject loops.

    Strata with few enough possible assignments are handled by exact
    enumeration: drawing uniformly from the acceptance set is distributionally
    identical to rejection sampling and detects an empty acceptance set
    exactly instead of burning the whole attempt budget.
    """
    sizes = pop.sizes
    counts = pop.treated_counts
    treated_locals: list[np.ndarray | None] = [None] * pop.k
    m_strata: list[float] = []
    attempts_k: list[int] = []
    modes: list[str] = []
    fell_back = False
    for k in range(pop.k):
        a_k = criterion.thresholds[k]
        target = criterion.target_acceptance[k]
        count = math.comb(int(sizes[k]), int(counts[k]))
        if count <= enum_cap and target < 0.5:
            combos, m = _stratum_m_values_enumerated(pop, dm, k)
            accepted = np.flatnonzero(m < a_k)
            if accepted.size:
                pick = accepted[rng.integers(accepted.size)]
                treated_locals[k] = combos[pick]
                m_strata.append(float(m[pick]))
                attempts_k.append(1)
                modes.append("enumerated")
                continue
            if criterion.fallback is Fallback.ERROR_OUT:
                raise AttemptsExhausted(count, stratum=k)
            treated_locals[k] = rng.permutation(int(sizes[k]))[: counts[k]]
            m_strata.append(math.nan)
            attempts_k.append(1)
            modes.append("fallback")
            fell_back = True
            continue
        factor = dm.stratum_factor(k)
        xk = dm.stratum_x[k]
        n1 = int(counts[k])
        n0 = int(sizes[k]) - n1
        accepted_draw = None
        for attempt in range(1, criterion.max_attempts + 1):
            local = rng.permutation(int(sizes[k]))[:n1]
            treated_sum = xk[local].sum(axis=0)
            tx = treated_sum / n1 - (dm.stratum_sums[k] - treated_sum) / n0
            m = sizes[k] * numeric.quad_form_inv(factor, tx)
            if m < a_k:
                accepted_draw = (local, float(m), attempt)
                break
        if accepted_draw is not None:
            treated_locals[k], m_val, attempt = accepted_draw
            m_strata.append(m_val)
            attempts_k.append(attempt)
            modes.append("rejection")
            continue
        if criterion.fallback is Fallback.ERROR_OUT:
            raise AttemptsExhausted(criterion.max_attempts, stratum=k)
        treated_locals[k] = rng.permutation(int(sizes[k]))[:n1]
        m_strata.append(math.nan)
        attempts_k.append(criterion.max_attempts)
        modes.append("fallback")
        fell_back = True
    record = dict(seed_record or {}, attempts=int(sum(attempts_k)), fell_back=fell_back)
    return RerandomizeResult(
        assignment=_assignment_from_locals(pop, treated_locals, record),
        attempts=int(sum(attempts_k)),
        fell_back=fell_back,
        m_strata=m_strata,
        stratum_attempts=attempts_k,
        stratum_modes=modes,
    )


def rerandomize(
    pop: StratifiedPopulation,
    dm: DesignMatrices,
    criterion: BalanceCriterion,
    rng: np.random.Generator,
    seed_record: dict | None = None,
    enum_cap: int = 4096,
) -> RerandomizeResult:
    """Draw an assignment satisfying the balance criterion.

    SRRoM and SRRdM redraw the whole population until the (overall or pooled)
    Mahalanobis distance falls below the threshold; SRRsM rerandomizes each
    stratum separately and independently. On attempt exhaustion the fallback
    policy either raises AttemptsExhausted or returns an unconditioned
    stratified randomization draw with ``fell_back`` set.
    """
    pop.require_realizable()
    if criterion.variant is Variant.SR:
        treated_locals = _draw_treated_locals(rng, pop.sizes, pop.treated_counts)
        record = dict(seed_record or {}, attempts=1)
        return RerandomizeResult(
            assignment=_assignment_from_locals(pop, treated_locals, record),
            attempts=1,
            fell_back=False,
        )
    if criterion.variant in (Variant.SRROM, Variant.SRRDM):
        return _rerandomize_whole(pop, dm, criterion, rng, seed_record)
    if criterion.variant is Variant.SRRSM:
        if criterion.thresholds is None or len(criterion.thresholds) != pop.k:
            raise DomainError(
                f"SRRsM needs one threshold per stratum ({pop.k}), got {criterion.thresholds}"
            )
        return _rerandomize_stratum_specific(pop, dm, criterion, rng, seed_record, enum_cap)
    raise DomainError(f"unknown criterion variant {criterion.variant}")
