"""Estimators, the truncated-coordinate law, intervals, and oracle records."""

import math

import numpy as np
import pytest

from restrat import numeric
from restrat.balance import BalanceCriterion, build_design_matrices, threshold_for
from restrat.design import Assignment, StratifiedPopulation, enumerate_assignments
from restrat.errors import DomainError, InsufficientArm, MissingPotentialOutcomes
from restrat.inference import (
    TruncatedGaussianLaw,
    analyze_assignment,
    ci_sr,
    ci_srrom,
    ci_srrsm,
    nu_quantile,
    nu_quantiles,
    overall_variance_estimators,
    sample_L_pa,
    sample_L_pa_many,
    srrdm_bias,
    stratified_diff_in_means,
    stratum_variance_estimators,
    theoretical_variances,
    v_pa,
)
from restrat.rng import rng_from

from test_design import make_population


def ks_statistic(a, b):
    a = np.sort(a)
    b = np.sort(b)
    values = np.concatenate([a, b])
    cdf_a = np.searchsorted(a, values, side="right") / a.size
    cdf_b = np.searchsorted(b, values, side="right") / b.size
    return float(np.max(np.abs(cdf_a - cdf_b)))


def ks_threshold(n, m, alpha=0.001):
    c = math.sqrt(math.log(2.0 / alpha) / 2.0)
    return c * math.sqrt((n + m) / (n * m))


class TestDiffInMeans:
    def test_hand_arithmetic(self):
        # two strata of equal size, per-stratum arm differences 2 and 3
        y = np.array([3.0, 1.0, 5.0, 2.0])
        pop = StratifiedPopulation(
            covariates=np.zeros((4, 1)) + np.arange(4)[:, None],
            strata=(np.array([0, 1]), np.array([2, 3])),
            propensities=np.array([0.5, 0.5]),
            observed=y,
        )
        a = Assignment(z=np.array([1, 0, 1, 0]))
        assert stratified_diff_in_means(pop, a) == pytest.approx(2.5)

    def test_zero_effect_enumeration_mean(self):
        pop = make_population([4, 4], [0.5, 0.5], seed=31)
        same = StratifiedPopulation(
            covariates=pop.covariates,
            strata=pop.strata,
            propensities=pop.propensities,
            y1=pop.y0,
            y0=pop.y0,
        )
        values = [stratified_diff_in_means(same, a) for a in enumerate_assignments(same)]
        assert np.mean(values) == pytest.approx(0.0, abs=1e-14)

    def test_enumeration_unbiasedness(self):
        pop = make_population([4, 4], [0.5, 0.5], seed=32)
        tau = float(np.mean(pop.y1 - pop.y0))
        values = [stratified_diff_in_means(pop, a) for a in enumerate_assignments(pop)]
        assert np.mean(values) == pytest.approx(tau, abs=1e-14)


class TestVpa:
    def test_limit_one(self):
        assert v_pa(4, math.inf) == 1.0
        assert v_pa(4, 1e7) == pytest.approx(1.0, abs=1e-12)

    def test_closed_form_p2(self):
        expected = (1.0 - 2.0 * math.exp(-1.0)) / (1.0 - math.exp(-1.0))
        assert v_pa(2, 2.0) == pytest.approx(expected, abs=1e-12)

    def test_domain(self):
        with pytest.raises(DomainError):
            v_pa(2, 0.0)


class TestSampleLpa:
    def test_support_bound(self):
        a = threshold_for(4, 0.3)
        rng = rng_from(41, 1)
        for _ in range(500):
            assert abs(sample_L_pa(4, a, rng)) < math.sqrt(a)
        draws = sample_L_pa_many(4, a, 10_000, rng_from(42, 1))
        assert np.max(np.abs(draws)) < math.sqrt(a)

    def test_mean_and_variance_match_formula(self):
        p, pa = 8, 0.001
        a = threshold_for(p, pa)
        draws = sample_L_pa_many(p, a, 1_000_000, rng_from(43, 1))
        v = v_pa(p, a)
        se_mean = draws.std() / math.sqrt(draws.size)
        assert abs(draws.mean()) < 4.0 * se_mean
        sample_var = draws.var()
        m4 = np.mean((draws - draws.mean()) ** 4)
        se_var = math.sqrt(max(m4 - sample_var**2, 0.0) / draws.size)
        assert abs(sample_var - v) < 3.0 * se_var

    def test_radial_scalar_path_matches_batch(self):
        # target acceptance below 1e-2 triggers the scalar radial branch
        p, pa = 4, 0.005
        a = threshold_for(p, pa)
        rng = rng_from(44, 1)
        scalar = np.array([sample_L_pa(p, a, rng) for _ in range(20_000)])
        batch = sample_L_pa_many(p, a, 400_000, rng_from(45, 1))
        assert ks_statistic(scalar, batch) < ks_threshold(scalar.size, batch.size)

    def test_rejection_and_radial_paths_agree(self):
        # two-sample KS at alpha 0.001 between the production rejection path
        # (scalar, acceptance above 1e-2) and the radial path (batch)
        p, pa = 2, 0.05
        a = threshold_for(p, pa)
        rng = rng_from(46, 1)
        rejection = np.array([sample_L_pa(p, a, rng) for _ in range(100_000)])
        radial = sample_L_pa_many(p, a, 100_000, rng_from(47, 1))
        assert ks_statistic(rejection, radial) < ks_threshold(rejection.size, radial.size)


class TestNuQuantile:
    def test_r2_zero_is_normal(self):
        law = TruncatedGaussianLaw.overall(0.0, 4, threshold_for(4, 0.01), draws=200_000, seed=3)
        est = nu_quantile(law, 0.975)
        assert est.value == pytest.approx(numeric.normal_quantile(0.975), abs=4 * est.mc_se + 0.01)

    def test_symmetry(self):
        law = TruncatedGaussianLaw.overall(0.6, 4, threshold_for(4, 0.01), draws=200_000, seed=4)
        mid = nu_quantile(law, 0.5)
        assert abs(mid.value) < 4.0 * mid.mc_se + 1e-3
        lo, hi = nu_quantiles(law, [0.1, 0.9])
        assert lo.value == pytest.approx(-hi.value, abs=4 * (lo.mc_se + hi.mc_se) + 1e-3)

    def test_r2_one_p1_truncated_normal_oracle(self):
        # analytic quantile of a standard normal truncated to (-sqrt(a), sqrt(a))
        pa = 0.4
        a = threshold_for(1, pa)
        law = TruncatedGaussianLaw.overall(1.0, 1, a, draws=400_000, seed=5)
        root = math.sqrt(a)
        lo_mass = numeric.normal_cdf(-root)
        span = numeric.normal_cdf(root) - lo_mass
        for xi in (0.1, 0.25, 0.5, 0.9):
            oracle = numeric.normal_quantile(lo_mass + xi * span)
            est = nu_quantile(law, xi)
            assert est.value == pytest.approx(oracle, abs=4 * est.mc_se + 2e-3)

    def test_deterministic_given_seed(self):
        law = TruncatedGaussianLaw.overall(0.5, 3, 1.0, draws=50_000, seed=11)
        assert nu_quantile(law, 0.9).value == nu_quantile(law, 0.9).value

    def test_quantile_range_monotone_in_r2(self):
        a = threshold_for(4, 0.01)
        lengths = []
        for r2 in (0.0, 0.5, 0.99):
            law = TruncatedGaussianLaw.overall(r2, 4, a, draws=100_000, seed=12)
            lo, hi = nu_quantiles(law, [0.025, 0.975])
            lengths.append(hi.value - lo.value)
        assert lengths[0] >= lengths[1] - 0.02
        assert lengths[1] >= lengths[2] - 0.02


class TestVarianceEstimators:
    def test_constant_outcomes(self):
        pop = make_population([8, 8], [0.5, 0.5], seed=51, potentials=False)
        flat = StratifiedPopulation(
            covariates=pop.covariates,
            strata=pop.strata,
            propensities=pop.propensities,
            observed=np.full(pop.n, 3.0),
        )
        dm = build_design_matrices(flat)
        a = Assignment(z=np.tile([1, 0], 8))
        est = overall_variance_estimators(flat, dm, a)
        assert est.sigma_tt == 0.0
        assert est.r2 == 0.0

    def test_r2_in_unit_interval(self):
        rng_stream = rng_from(52, 1)
        for seed in range(10):
            pop = make_population([8, 12], [0.5, 0.5], seed=100 + seed)
            dm = build_design_matrices(pop)
            from restrat.design import stratified_randomize

            a = stratified_randomize(pop, rng_stream)
            est = overall_variance_estimators(pop, dm, a)
            assert 0.0 <= est.r2 <= 1.0

    def test_insufficient_arm(self):
        pop = make_population([2, 8], [0.5, 0.5], seed=53)
        dm = build_design_matrices(pop)
        z = np.zeros(pop.n, dtype=np.int8)
        z[pop.strata[0][:1]] = 1
        z[pop.strata[1][:4]] = 1
        with pytest.raises(InsufficientArm):
            overall_variance_estimators(pop, dm, Assignment(z=z))

    def test_stratum_zero_projection(self):
        # identical arm covariances make the projected-effect variance zero:
        # enforce by making y1 - y0 constant (s_XY(1) == s_XY(0) exactly
        # cannot be arranged post hoc, so use y1 = y0 + c on the same draw)
        pop = make_population([12], [0.5], seed=54)
        shifted = StratifiedPopulation(
            covariates=pop.covariates,
            strata=pop.strata,
            propensities=pop.propensities,
            observed=None,
            y1=pop.y0 + 2.0,
            y0=pop.y0,
        )
        dm = build_design_matrices(shifted)
        from restrat.design import stratified_randomize

        a = stratified_randomize(shifted, rng_from(55, 1))
        est = stratum_variance_estimators(shifted, dm, a, 0)
        # same units observed in both arms is impossible; the projection term
        # is small but the floor and clip invariants must hold regardless
        assert est.sigma_tt >= 0.0
        assert 0.0 <= est.r2 <= 1.0

    def test_stratum_negative_r2_floored(self):
        # pure-noise outcomes at a small stratum: raw stratum r2 is often
        # negative and must be reported as exactly zero
        floored = 0
        for seed in range(30):
            pop = make_population([8], [0.5], p=3, seed=800 + seed)
            rng = np.random.default_rng(seed)
            noisy = StratifiedPopulation(
                covariates=pop.covariates,
                strata=pop.strata,
                propensities=pop.propensities,
                y1=rng.standard_normal(pop.n),
                y0=rng.standard_normal(pop.n),
            )
            dm = build_design_matrices(noisy)
            from restrat.design import stratified_randomize

            a = stratified_randomize(noisy, rng_from(900 + seed, 1))
            est = stratum_variance_estimators(noisy, dm, a, 0)
            assert est.r2 >= 0.0
            floored += est.r2 == 0.0
        assert floored > 0


class TestConfidenceIntervals:
    def _population(self, seed=61, sizes=(40, 60)):
        return make_population(list(sizes), [0.5] * len(sizes), p=3, seed=seed)

    def test_srrom_reduces_to_normal_when_r2_zero(self):
        pop = self._population()
        dm = build_design_matrices(pop)
        from restrat.design import stratified_randomize

        a = stratified_randomize(pop, rng_from(62, 1))
        y = np.where(a.z == 1, pop.y1, pop.y0)
        flat = StratifiedPopulation(
            covariates=pop.covariates,
            strata=pop.strata,
            propensities=pop.propensities,
            observed=np.round(y, 12),
        )
        # decouple outcomes from covariates: permute outcomes within strata
        rng = np.random.default_rng(63)
        shuffled = flat.observed.copy()
        for idx in flat.strata:
            shuffled[idx] = rng.permutation(shuffled[idx])
        flat = StratifiedPopulation(
            covariates=flat.covariates,
            strata=flat.strata,
            propensities=flat.propensities,
            observed=shuffled,
        )
        report_rr = ci_srrom(flat, dm, a, a=threshold_for(3, 0.01), alpha=0.05, seed=7)
        report_sr = ci_sr(flat, dm, a, alpha=0.05)
        # r2 is small but nonzero in sample; intervals should be close
        assert report_rr.ci_lower == pytest.approx(report_sr.ci_lower, abs=0.25)
        assert report_rr.ci_upper == pytest.approx(report_sr.ci_upper, abs=0.25)

    def test_srrom_accept_all_equals_sr(self):
        pop = self._population(seed=64)
        dm = build_design_matrices(pop)
        from restrat.design import stratified_randomize

        a = stratified_randomize(pop, rng_from(65, 1))
        report_rr = ci_srrom(pop, dm, a, a=math.inf, alpha=0.05, draws=400_000, seed=8)
        report_sr = ci_sr(pop, dm, a, alpha=0.05)
        tol = 4.0 * max(report_rr.metadata["quantile_mc_se"]) * math.sqrt(
            report_rr.variance_estimate / pop.n
        ) + 1e-6
        assert report_rr.variance_estimate == pytest.approx(report_sr.variance_estimate, rel=1e-12)
        assert report_rr.ci_lower == pytest.approx(report_sr.ci_lower, abs=tol)
        assert report_rr.ci_upper == pytest.approx(report_sr.ci_upper, abs=tol)

    def test_srrsm_single_stratum_matches_srrom(self):
        # At K = 1 the two constructions share tau_hat, the threshold, and the
        # projected component exactly: sigma_tt_hat * r2_hat equals
        # sigma_[1]tt_hat * r2_[1]_hat identically, and the variance estimates
        # differ by exactly the projected-effect term s2_tau|X (the stratum
        # estimator subtracts it, the overall one keeps it for conservatism).
        pop = make_population([80], [0.5], p=3, seed=66)
        dm = build_design_matrices(pop)
        from restrat.design import stratified_randomize

        a = stratified_randomize(pop, rng_from(67, 1))
        thr = threshold_for(3, 0.05)
        r_om = ci_srrom(pop, dm, a, a=thr, alpha=0.05, draws=400_000, seed=9)
        r_sm = ci_srrsm(pop, dm, a, thresholds=[thr], alpha=0.05, draws=400_000, seed=10)
        assert r_sm.tau_hat == r_om.tau_hat

        overall = overall_variance_estimators(pop, dm, a)
        stratum = stratum_variance_estimators(pop, dm, a, 0)
        assert overall.sigma_tt * overall.r2 == pytest.approx(
            stratum.sigma_tt * stratum.r2, rel=1e-10
        )
        assert r_om.variance_estimate - r_sm.variance_estimate == pytest.approx(
            stratum.s2_tau_given_x, rel=1e-10
        )
        # the stratum interval is never wider than the overall one at K = 1
        mc_tol = 4.0 * (
            max(r_om.metadata["quantile_mc_se"]) + max(r_sm.metadata["quantile_mc_se"])
        )
        assert (r_sm.ci_upper - r_sm.ci_lower) <= (r_om.ci_upper - r_om.ci_lower) + mc_tol

    def test_report_invariants(self):
        pop = self._population(seed=68)
        dm = build_design_matrices(pop)
        from restrat.design import stratified_randomize

        a = stratified_randomize(pop, rng_from(69, 1))
        crit = BalanceCriterion.stratum_specific(pop.p, 0.2, k=pop.k)
        report = analyze_assignment(pop, dm, a, crit, alpha=0.05, draws=50_000, seed=11)
        assert report.ci_lower <= report.tau_hat <= report.ci_upper
        assert report.variance_estimate >= 0.0
        assert all(0.0 <= r <= 1.0 for r in report.r2_estimate)

    def test_srrdm_analysis_rejected(self):
        pop = self._population(seed=70)
        dm = build_design_matrices(pop)
        from restrat.design import stratified_randomize

        a = stratified_randomize(pop, rng_from(71, 1))
        crit = BalanceCriterion.diff_in_means(pop.p, 0.1)
        with pytest.raises(DomainError):
            analyze_assignment(pop, dm, a, crit)


def linear_population(sizes, propensities, gammas, seed, delta=1.0, noise=0.0, p=2):
    """Exactly linear potentials: y0 = X gamma_k + stratum shift, y1 = y0 + delta."""
    rng = np.random.default_rng(seed)
    n = sum(sizes)
    bounds = np.cumsum([0] + list(sizes))
    strata = tuple(np.arange(bounds[k], bounds[k + 1]) for k in range(len(sizes)))
    x = rng.standard_normal((n, p))
    y0 = np.empty(n)
    for k, idx in enumerate(strata):
        y0[idx] = x[idx] @ np.asarray(gammas[k]) + 0.5 * k
    if noise:
        y0 = y0 + noise * rng.standard_normal(n)
    return StratifiedPopulation(
        covariates=x,
        strata=strata,
        propensities=np.array(propensities),
        y1=y0 + delta,
        y0=y0,
    )


class TestTheoreticalVariances:
    def test_uncorrelated_covariates_give_zero_r2(self):
        pop = make_population([20, 20], [0.5, 0.5], p=2, seed=72, potentials=False)
        const = StratifiedPopulation(
            covariates=pop.covariates,
            strata=pop.strata,
            propensities=pop.propensities,
            y1=np.ones(pop.n) * 2.0,
            y0=np.ones(pop.n),
        )
        dm = build_design_matrices(const)
        theory = theoretical_variances(const, dm, pa_overall=0.01)
        assert theory.r2 == 0.0
        assert theory.reduction_srrom == 0.0
        assert theory.var_srrom == pytest.approx(theory.var_sr)

    def test_equal_projection_coefficients_equalize_variances(self):
        gamma = np.array([1.3, -0.7])
        pop = linear_population([30, 50], [0.3, 0.5], [gamma, gamma], seed=73)
        dm = build_design_matrices(pop)
        theory = theoretical_variances(pop, dm, pa_overall=0.01)
        assert theory.var_srrsm == pytest.approx(theory.var_srrom, abs=1e-10)

    def test_heterogeneous_strata_strict_ordering(self):
        pop = linear_population(
            [30, 50], [0.5, 0.5], [np.array([2.0, 0.0]), np.array([-1.0, 1.5])],
            seed=74, noise=0.3,
        )
        dm = build_design_matrices(pop)
        theory = theoretical_variances(pop, dm, pa_overall=0.01)
        assert theory.var_srrsm < theory.var_srrom

    def test_missing_potentials(self):
        pop = make_population([10, 10], [0.5, 0.5], seed=75, potentials=False)
        dm = build_design_matrices(pop)
        with pytest.raises(MissingPotentialOutcomes):
            theoretical_variances(pop, dm)


class TestSrrdmBias:
    def test_zero_projection_gives_exact_zero(self):
        pop = make_population([20, 20], [0.4, 0.6], p=2, seed=76, potentials=False)
        const = StratifiedPopulation(
            covariates=pop.covariates,
            strata=pop.strata,
            propensities=pop.propensities,
            y1=np.full(pop.n, 2.0),
            y0=np.full(pop.n, 1.0),
        )
        dm = build_design_matrices(const)
        result = srrdm_bias(const, dm, a=2.0, mc_draws=5_000, rng=rng_from(77, 1))
        assert result.bias == 0.0

    def test_equal_propensities_unbiased(self):
        pop = make_population([30, 30], [0.5, 0.5], p=2, seed=78)
        dm = build_design_matrices(pop)
        result = srrdm_bias(pop, dm, a=1.0, mc_draws=200_000, rng=rng_from(79, 1))
        assert result.noncentrality == pytest.approx(0.0, abs=1e-20)
        assert abs(result.bias) < 4.0 * result.mc_se


class TestEstimatorConsistency:
    def test_overall_estimator_targets_inflated_variance(self):
        # n = 5000 linear DGP: sigma_tt_hat approaches sigma_tt + sum_k pi_k S2_ktau
        from restrat.sim import Case, DgpConfig, generate_population
        from restrat.design import stratified_randomize

        cfg = DgpConfig(
            case=Case.TWO_LARGE_HOMOGENEOUS, large_size=2500, p=8,
            linear_outcomes=True, noise_var=10.0, seed=571,
        )
        pop = generate_population(cfg)
        dm = build_design_matrices(pop)
        theory = theoretical_variances(pop, dm, pa_overall=0.01)
        tau_units = pop.y1 - pop.y0
        inflation = sum(
            pop.weights[k] * np.var(tau_units[idx], ddof=1)
            for k, idx in enumerate(pop.strata)
        )
        target = theory.sigma_tt + inflation
        a = stratified_randomize(pop, rng_from(572, 1))
        est = overall_variance_estimators(pop, dm, a)
        assert est.sigma_tt == pytest.approx(target, rel=0.05)

    def test_stratum_estimator_conservative_at_large_stratum(self):
        from restrat.sim import Case, DgpConfig, generate_population
        from restrat.design import stratified_randomize

        cfg = DgpConfig(
            case=Case.TWO_LARGE_HOMOGENEOUS, large_size=2500, p=8,
            linear_outcomes=True, noise_var=10.0, seed=573,
        )
        pop = generate_population(cfg)
        dm = build_design_matrices(pop)
        theory = theoretical_variances(pop, dm, pa_overall=0.01)
        a = stratified_randomize(pop, rng_from(574, 1))
        for k in range(pop.k):
            est = stratum_variance_estimators(pop, dm, a, k)
            assert not est.projection_guarded
            assert est.sigma_tt >= theory.stratum_sigma_tt[k] * (1.0 - 0.10)


class TestConservativeness:
    def test_variance_estimators_upper_bound_empirical_variance(self):
        # Theorem-3 and Theorem-7 style plug-ins vs the empirical variance of
        # sqrt(n)(tau_hat - tau) over replications of each design
        from restrat.sim import Case, DgpConfig, generate_population
        from restrat.balance import BalanceCriterion, rerandomize, fair_stratum_target

        cfg = DgpConfig(
            case=Case.TWO_LARGE_HOMOGENEOUS, large_size=400, p=4,
            linear_outcomes=True, noise_var=10.0, seed=581,
        )
        pop = generate_population(cfg)
        dm = build_design_matrices(pop)
        tau = float(np.mean(pop.y1 - pop.y0))
        pa = 0.05
        a = threshold_for(pop.p, pa)
        v = v_pa(pop.p, a)
        vs = [v_pa(pop.p, threshold_for(pop.p, fair_stratum_target(pa, pop.k)))] * pop.k
        a_k = [threshold_for(pop.p, fair_stratum_target(pa, pop.k))] * pop.k
        reps = 500

        for lane, (label, crit, thresholds) in enumerate((
            ("overall", BalanceCriterion.overall(pop.p, pa), None),
            ("stratum", BalanceCriterion.stratum_specific(
                pop.p, fair_stratum_target(pa, pop.k), k=pop.k), a_k),
        )):
            errs = np.empty(reps)
            estimates = np.empty(reps)
            for r in range(reps):
                res = rerandomize(pop, dm, crit, rng_from(582, 3, lane, r))
                y = np.where(res.assignment.z == 1, pop.y1, pop.y0)
                errs[r] = stratified_diff_in_means(pop, res.assignment, outcomes=y) - tau
                if thresholds is None:
                    est = overall_variance_estimators(pop, dm, res.assignment, outcomes=y)
                    estimates[r] = est.sigma_tt * (1.0 - (1.0 - v) * est.r2)
                else:
                    total = 0.0
                    for k in range(pop.k):
                        e = stratum_variance_estimators(pop, dm, res.assignment, k, outcomes=y)
                        total += pop.weights[k] * e.sigma_tt * (1.0 - (1.0 - vs[k]) * e.r2)
                    estimates[r] = total
            emp_var = pop.n * float(np.mean(errs * errs))
            emp_se = emp_var * math.sqrt(2.0 / reps)
            assert float(estimates.mean()) >= emp_var - 3.0 * emp_se, label


class TestExactConditionalLaw:
    def test_conditional_mean_equals_tau_for_additive_effects(self):
        # enumerable design, equal propensities, additive effect: the flip
        # z -> 1 - z preserves the balance statistic and negates tau_hat - tau,
        # so the conditional mean over any accepted set is exactly tau
        pop = make_population([8], [0.5], p=2, seed=591, potentials=False)
        additive = StratifiedPopulation(
            covariates=pop.covariates,
            strata=pop.strata,
            propensities=pop.propensities,
            y1=pop.covariates @ np.array([1.0, -2.0]) + 3.0,
            y0=pop.covariates @ np.array([1.0, -2.0]),
        )
        dm = build_design_matrices(additive)
        from restrat.balance import mahalanobis_overall, tau_x_hat
        a_threshold = 1.5
        accepted = []
        for a in enumerate_assignments(additive):
            m = mahalanobis_overall(dm, tau_x_hat(additive, dm, a), additive.n)
            if m < a_threshold:
                accepted.append(stratified_diff_in_means(additive, a))
        assert len(accepted) > 0
        assert np.mean(accepted) == pytest.approx(3.0, abs=1e-12)
