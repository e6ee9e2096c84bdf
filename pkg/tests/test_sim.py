"""DGP realism, determinism, and the replication engine's bookkeeping."""

import math

import numpy as np
import pytest

from restrat.balance import BalanceCriterion, Fallback
from restrat.sim import (
    Case,
    DgpConfig,
    PropensityMode,
    generate_population,
    metrics_table_text,
    paper_case,
    run_study,
    run_study_population,
)

DESK = DgpConfig(
    case=Case.TWO_LARGE_HOMOGENEOUS,
    large_size=60,
    p=3,
    noise_var=10.0,
    seed=101,
)


class TestGeneratePopulation:
    def test_same_seed_bit_identical(self):
        a = generate_population(DESK)
        b = generate_population(DESK)
        assert np.array_equal(a.covariates, b.covariates)
        assert np.array_equal(a.y1, b.y1)
        assert np.array_equal(a.y0, b.y0)

    def test_covariate_covariance_matches_ar1(self):
        cfg = DgpConfig(
            case=Case.TWO_LARGE_HOMOGENEOUS, large_size=50_000, p=4, seed=7
        )
        pop = generate_population(cfg)
        sample_cov = np.cov(pop.covariates.T)
        target = 0.5 ** np.abs(np.subtract.outer(np.arange(4), np.arange(4)))
        assert np.max(np.abs(sample_cov - target)) < 0.02

    def test_paper_scale_case1(self):
        cfg = paper_case(Case.MANY_SMALL, k=50)
        assert cfg.sizes() == (10,) * 50
        assert cfg.p == 8
        pop = generate_population(cfg)
        assert pop.n == 500
        assert pop.k == 50

    def test_case2_structure(self):
        cfg = DgpConfig(case=Case.MANY_SMALL_PLUS_TWO_LARGE, k=12, seed=3)
        assert cfg.sizes() == (10,) * 10 + (100, 100)

    def test_unequal_propensities(self):
        cfg = DgpConfig(case=Case.MANY_SMALL, k=5, propensity_mode=PropensityMode.UNEQUAL)
        assert cfg.propensities(5) == (0.4, 0.4, 0.6, 0.6, 0.6)

    def test_linear_outcomes_flag(self):
        cfg = DgpConfig(
            case=Case.TWO_LARGE_HOMOGENEOUS, large_size=500, p=3,
            linear_outcomes=True, noise_var=0.0, seed=11,
        )
        pop = generate_population(cfg)
        # with the exponential coefficients zeroed and no noise, outcomes are
        # exactly affine in the covariates
        x1 = np.column_stack([pop.covariates, np.ones(pop.n)])
        resid = pop.y1 - x1 @ np.linalg.lstsq(x1, pop.y1, rcond=None)[0]
        assert np.max(np.abs(resid)) < 1e-9


class TestRunStudy:
    def _methods(self, p, k):
        return [
            BalanceCriterion.sr(label="SR"),
            BalanceCriterion.overall(p, 0.1, label="SRRoM"),
            BalanceCriterion.stratum_specific(
                p, 0.1 ** (1.0 / k), k=k, label="SRRsM(f)"
            ),
        ]

    def test_deterministic_and_metrics_identity(self):
        methods = self._methods(DESK.p, 2)
        res1 = run_study(DESK, methods, reps=60, law_draws=20_000)
        res2 = run_study(DESK, methods, reps=60, law_draws=20_000)
        for m1, m2 in zip(res1.metrics, res2.metrics):
            assert m1.bias == m2.bias
            assert m1.mean_ci_length == m2.mean_ci_length
        for m in res1.metrics:
            lhs = m.rmse**2
            rhs = m.bias**2 + m.sd**2 * (m.reps - 1) / m.reps
            assert lhs == pytest.approx(rhs, abs=1e-10)

    def test_doubling_reps_preserves_prefix(self):
        methods = [BalanceCriterion.overall(DESK.p, 0.2, label="SRRoM")]
        short = run_study(DESK, methods, reps=30, law_draws=20_000)
        long = run_study(DESK, methods, reps=60, law_draws=20_000)
        assert np.array_equal(short.samples["SRRoM"], long.samples["SRRoM"][:30])

    def test_threads_do_not_change_results(self):
        methods = self._methods(DESK.p, 2)
        res1 = run_study(DESK, methods, reps=40, law_draws=20_000, threads=1)
        res4 = run_study(DESK, methods, reps=40, law_draws=20_000, threads=4)
        for m1, m4 in zip(res1.metrics, res4.metrics):
            assert m1.bias == m4.bias
            assert m1.rmse == m4.rmse
            assert m1.coverage == m4.coverage

    def test_sr_unbiased_and_covered(self):
        # additive constant effect: SR is exactly unbiased; coverage at or
        # above nominal up to binomial noise
        cfg = DgpConfig(
            case=Case.TWO_LARGE_HOMOGENEOUS, large_size=100, p=3,
            linear_outcomes=True, seed=13,
        )
        pop = generate_population(cfg)
        pop = type(pop)(
            covariates=pop.covariates,
            strata=pop.strata,
            propensities=pop.propensities,
            y1=pop.y0 + 1.5,
            y0=pop.y0,
        )
        reps = 600
        res = run_study_population(
            pop, [BalanceCriterion.sr(label="SR")], reps=reps, seed=21
        )
        m = res.metrics[0]
        se = m.sd / math.sqrt(reps)
        assert abs(m.bias) < 3.0 * se
        assert m.coverage >= 0.95 - 3.0 * math.sqrt(0.95 * 0.05 / reps)

    def test_fallback_counting(self):
        # impossible stratum criterion: tiny stratum, absurdly small target
        cfg = DgpConfig(case=Case.MANY_SMALL, k=3, small_size=4, p=2, seed=17)
        pop = generate_population(cfg)
        crit = BalanceCriterion.stratum_specific(
            2, 1e-9, k=3, fallback=Fallback.FALL_BACK_TO_SR, label="SRRsM(u)"
        )
        res = run_study_population(pop, [crit], reps=25, seed=23, law_draws=5_000)
        assert res.metrics[0].fallback_count == 25

    def test_table_text_columns(self):
        methods = [BalanceCriterion.sr(label="SR")]
        res = run_study(DESK, methods, reps=20, law_draws=10_000)
        text = metrics_table_text(res)
        for column in ("Bias", "SD", "RMSE", "CI length", "CP (%)"):
            assert column in text

    def test_redraw_population_mode(self):
        cfg = DgpConfig(
            case=Case.TWO_LARGE_HOMOGENEOUS, large_size=40, p=2, seed=29
        )
        res = run_study(cfg, [BalanceCriterion.sr(label="SR")], reps=10,
                        redraw_population=True)
        assert res.manifest["redraw_population"] is True
        assert res.metrics[0].reps == 10


class TestAcceptanceRateTrend:
    def test_rate_approaches_target_with_n(self):
        # empirical SRRoM acceptance rate approaches the target as n grows
        pa = 0.05
        rates = []
        for size in (20, 100, 500):
            cfg = DgpConfig(
                case=Case.TWO_LARGE_HOMOGENEOUS, large_size=size, p=3, seed=31
            )
            pop = generate_population(cfg)
            crit = BalanceCriterion.overall(3, pa, label="SRRoM")
            res = run_study_population(pop, [crit], reps=150, seed=37, law_draws=5_000)
            rates.append(1.0 / res.metrics[0].mean_attempts)
        errors = [abs(r - pa) for r in rates]
        assert errors[-1] < errors[0] + 0.02
        assert errors[-1] < 0.02


class TestCase4Directional:
    def test_stratum_specific_beats_sr_in_heterogeneous_case(self):
        # heterogeneous two-stratum design: the stratum-specific interval is
        # shorter than SR's and still covers at or above the floor
        cfg = DgpConfig(
            case=Case.TWO_LARGE_HETEROGENEOUS, large_size=200, p=8, seed=7402
        )
        pop = generate_population(cfg)
        pa = 0.05
        methods = [
            BalanceCriterion.sr(label="SR"),
            BalanceCriterion.stratum_specific(
                pop.p, pa ** (1.0 / pop.k), k=pop.k, label="SRRsM(f)"
            ),
        ]
        reps = 300
        res = run_study_population(pop, methods, reps=reps, seed=75, law_draws=30_000)
        by_name = {m.method: m for m in res.metrics}
        floor = 0.95 - 3.0 * math.sqrt(0.95 * 0.05 / reps)
        assert by_name["SRRsM(f)"].mean_ci_length < by_name["SR"].mean_ci_length
        assert by_name["SRRsM(f)"].coverage >= floor
