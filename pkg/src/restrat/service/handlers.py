"""Shared request handlers: the FastAPI routes and the CLI both call these.

Each handler takes a validated request model, runs the core library, and
returns a response model whose manifest is sufficient to re-run the call.
"""

from __future__ import annotations

import math

import numpy as np

from .. import __version__
from ..balance import (
    BalanceCriterion,
    Fallback,
    Variant,
    build_design_matrices,
    fair_stratum_target,
    mahalanobis_dm,
    mahalanobis_overall,
    mahalanobis_stratum,
    rerandomize,
    tau_x_hat,
    threshold_for,
)
from ..datafiles import UnitTable, population_from_table
from ..design import StratifiedPopulation, validate_population
from ..errors import PopulationError, SingularCovariance
from ..inference import (
    TruncatedGaussianLaw,
    analyze_assignment,
    nu_quantiles,
    v_pa,
)
from ..rng import LANE_ASSIGNMENT, rng_from
from ..sim import Case, DgpConfig, PropensityMode, metrics_table_text, run_study
from . import schemas

__all__ = ["assign", "analyze", "quantile", "simulate", "table_from_units"]


def table_from_units(units, covariate_names=None) -> UnitTable:
    arity = {len(u.covariates) for u in units}
    if len(arity) != 1:
        raise PopulationError(f"units disagree on covariate arity: {sorted(arity)}")
    p = arity.pop()
    if covariate_names is None:
        covariate_names = [f"x_{j + 1}" for j in range(p)]
    elif len(covariate_names) != p:
        raise PopulationError(
            f"{len(covariate_names)} covariate names for {p} covariate values"
        )
    treated = None
    if any(u.treated is not None for u in units):
        if not all(u.treated is not None for u in units):
            raise PopulationError("treated is set on some units but not all")
        treated = np.array([u.treated for u in units], dtype=np.int8)
    outcome = None
    if any(u.outcome is not None for u in units):
        if not all(u.outcome is not None for u in units):
            raise PopulationError("outcome is set on some units but not all")
        outcome = np.array([u.outcome for u in units], dtype=float)
    return UnitTable(
        unit_ids=[u.unit_id for u in units],
        strata_labels=[u.stratum for u in units],
        covariates=np.array([u.covariates for u in units], dtype=float),
        covariate_names=list(covariate_names),
        treated=treated,
        outcome=outcome,
    )


def _require_valid(pop: StratifiedPopulation) -> None:
    report = validate_population(pop)
    if not report.ok:
        raise PopulationError("; ".join(report.errors))


def _stratum_targets(req, pop) -> list[float]:
    if req.stratum_targets is not None:
        try:
            return [float(req.stratum_targets[label]) for label in pop.stratum_labels]
        except KeyError as exc:
            raise PopulationError(
                f"no stratum target for stratum {exc.args[0]!r}"
            ) from exc
    if req.srrsm_mode == "fair":
        return [fair_stratum_target(req.target_acceptance, pop.k)] * pop.k
    return [req.target_acceptance] * pop.k


def _criterion(req, pop, default_fallback_srrsm="sr") -> BalanceCriterion:
    method = req.method
    fallback = getattr(req, "fallback", None)
    max_attempts = getattr(req, "max_attempts", 1_000_000)
    if method == "sr":
        return BalanceCriterion.sr()
    if method == "srrom":
        return BalanceCriterion.overall(
            pop.p, req.target_acceptance, max_attempts=max_attempts,
            fallback=_fb(fallback or "error"), label="SRRoM",
        )
    if method == "srrsm":
        return BalanceCriterion.stratum_specific(
            pop.p, _stratum_targets(req, pop), max_attempts=max_attempts,
            fallback=_fb(fallback or default_fallback_srrsm), label="SRRsM",
        )
    return BalanceCriterion.diff_in_means(
        pop.p, req.target_acceptance, max_attempts=max_attempts,
        fallback=_fb(fallback or "error"), label="SRRdM",
    )


def _fb(name: str) -> Fallback:
    return Fallback.ERROR_OUT if name == "error" else Fallback.FALL_BACK_TO_SR


def assign(req: schemas.AssignRequest) -> schemas.AssignResponse:
    """Draw one accepted assignment for the submitted units."""
    if any(u.treated is not None for u in req.units):
        raise PopulationError("assign requires units without a treated value")
    table = table_from_units(req.units, req.covariate_names)
    if req.propensities is None:
        raise PopulationError("assign needs propensities (scalar or per-stratum mapping)")
    pop = population_from_table(table, req.propensities)
    _require_valid(pop)
    dm = build_design_matrices(pop, ridge=req.ridge)
    criterion = _criterion(req, pop)
    rng = rng_from(req.seed, LANE_ASSIGNMENT)
    result = rerandomize(
        pop, dm, criterion, rng,
        seed_record={"seed": req.seed, "lane": LANE_ASSIGNMENT},
    )

    m_overall = result.m_overall
    if m_overall is None:
        if criterion.variant is Variant.SRRDM:
            m_overall = mahalanobis_dm(pop, dm, result.assignment)
        else:
            tx = tau_x_hat(pop, dm, result.assignment)
            m_overall = mahalanobis_overall(dm, tx, pop.n)
    m_strata = result.m_strata
    if m_strata is None:
        m_strata = []
        for k in range(pop.k):
            try:
                m_strata.append(mahalanobis_stratum(pop, dm, result.assignment, k))
            except SingularCovariance:
                m_strata.append(None)
    m_strata = [v if v is not None and math.isfinite(v) else None for v in m_strata]

    manifest = {
        "schema_version": schemas.SCHEMA_VERSION,
        "tool": "restrat",
        "version": __version__,
        "endpoint": "assign",
        "method": req.method,
        "seed": req.seed,
        "target_acceptance": list(criterion.target_acceptance or []),
        "thresholds": list(criterion.thresholds or []),
        "max_attempts": req.max_attempts,
        "fallback": criterion.fallback.value,
        "ridge": req.ridge,
        "strata": list(pop.stratum_labels),
        "propensities": [float(v) for v in pop.propensities],
        "covariate_names": table.covariate_names,
        "n": pop.n,
    }
    if req.method == "srrdm":
        manifest["note"] = (
            "the pooled difference-in-means criterion yields a biased estimator"
            " under unequal propensity scores"
        )
    notes = []
    empirical = None
    if criterion.variant in (Variant.SRROM, Variant.SRRDM):
        empirical = 1.0 / result.attempts
        notes.append(
            f"accepted on attempt {result.attempts};"
            f" empirical acceptance about {empirical:.4g}"
        )
    if result.stratum_modes is not None:
        for k, mode in enumerate(result.stratum_modes):
            if mode == "enumerated":
                notes.append(
                    f"stratum {pop.stratum_labels[k]}: drawn uniformly from the"
                    " enumerated acceptance set"
                )
            elif mode == "fallback":
                notes.append(
                    f"stratum {pop.stratum_labels[k]}: no acceptable assignment,"
                    " fell back to stratified randomization"
                )
    if result.fell_back and not notes:
        notes.append("attempt budget exhausted; fell back to stratified randomization")
    return schemas.AssignResponse(
        treated=[int(v) for v in result.assignment.z],
        method=req.method,
        attempts=result.attempts,
        fell_back=result.fell_back,
        m_overall=m_overall if m_overall is None or math.isfinite(m_overall) else None,
        m_strata=[None if v is None else float(v) for v in m_strata],
        thresholds=list(criterion.thresholds) if criterion.thresholds else None,
        target_acceptance=list(criterion.target_acceptance)
        if criterion.target_acceptance
        else None,
        empirical_acceptance=empirical,
        notes=notes,
        manifest=manifest,
    )


def analyze(req: schemas.AnalyzeRequest) -> schemas.AnalyzeResponse:
    """Estimate the effect and a conservative interval for analyzed units."""
    table = table_from_units(req.units, req.covariate_names)
    if table.treated is None:
        raise PopulationError("analyze requires a treated value on every unit")
    if table.outcome is None:
        raise PopulationError("analyze requires an outcome value on every unit")
    pop = population_from_table(table, req.propensities)
    _require_valid(pop)
    dm = build_design_matrices(pop, ridge=req.ridge)
    criterion = _criterion(req, pop)
    from ..design import Assignment

    assignment = Assignment(z=table.treated)
    report = analyze_assignment(
        pop, dm, assignment, criterion,
        alpha=req.alpha, draws=req.draws, seed=req.seed,
        r2_override=req.r2_override,
    )
    manifest = {
        "schema_version": schemas.SCHEMA_VERSION,
        "tool": "restrat",
        "version": __version__,
        "endpoint": "analyze",
        "method": req.method,
        "alpha": req.alpha,
        "seed": req.seed,
        "draws": req.draws,
        "target_acceptance": list(criterion.target_acceptance or []),
        "thresholds": list(criterion.thresholds or []),
        "ridge": req.ridge,
        "strata": list(pop.stratum_labels),
        "propensities": [float(v) for v in pop.propensities],
        "covariate_names": table.covariate_names,
        "n": pop.n,
    }
    return schemas.AnalyzeResponse(
        tau_hat=report.tau_hat,
        method=report.method,
        variance_estimate=report.variance_estimate,
        r2_estimate=report.r2_estimate,
        ci_lower=report.ci_lower,
        ci_upper=report.ci_upper,
        alpha=report.alpha,
        v=report.v,
        thresholds=report.thresholds,
        metadata=report.metadata,
        manifest=manifest,
    )


def quantile(req: schemas.QuantileRequest) -> schemas.QuantileResponse:
    """Thresholds, truncated-coordinate variances, and law quantiles."""
    if req.components is None:
        a = (
            req.threshold
            if req.threshold is not None
            else threshold_for(req.p, req.target_acceptance)
        )
        law = TruncatedGaussianLaw.overall(
            req.r2, req.p, a, draws=req.draws, seed=req.seed
        )
        thresholds = [a]
    else:
        thresholds = [
            c.threshold
            if c.threshold is not None
            else threshold_for(req.p, c.target_acceptance)
            for c in req.components
        ]
        law = TruncatedGaussianLaw.mixture(
            [c.weight for c in req.components],
            [c.r2 for c in req.components],
            req.p,
            thresholds,
            draws=req.draws,
            seed=req.seed,
        )
    estimates = nu_quantiles(law, req.xis)
    manifest = {
        "schema_version": schemas.SCHEMA_VERSION,
        "tool": "restrat",
        "version": __version__,
        "endpoint": "quantile",
        "p": req.p,
        "draws": req.draws,
        "seed": req.seed,
        "law": {
            "normal_scale": law.normal_scale,
            "trunc_scales": list(law.trunc_scales),
            "thresholds": list(law.thresholds),
        },
    }
    return schemas.QuantileResponse(
        thresholds=[float(t) for t in thresholds],
        v=[float(v_pa(req.p, t)) for t in thresholds],
        quantiles=[
            schemas.QuantileValue(xi=e.xi, value=e.value, mc_se=e.mc_se)
            for e in estimates
        ],
        manifest=manifest,
    )


def _method_criterion(spec: schemas.MethodSpecIn, p: int, k: int) -> BalanceCriterion:
    if spec.variant == "sr":
        return BalanceCriterion.sr(label=spec.name)
    if spec.variant == "srrom":
        return BalanceCriterion.overall(
            p, spec.target_acceptance, max_attempts=spec.max_attempts,
            fallback=_fb(spec.fallback or "error"), label=spec.name,
        )
    if spec.variant == "srrsm":
        if spec.srrsm_mode == "fair":
            targets = [fair_stratum_target(spec.target_acceptance, k)] * k
        else:
            targets = [spec.target_acceptance] * k
        return BalanceCriterion.stratum_specific(
            p, targets, max_attempts=spec.max_attempts,
            fallback=_fb(spec.fallback or "sr"), label=spec.name,
        )
    return BalanceCriterion.diff_in_means(
        p, spec.target_acceptance, max_attempts=spec.max_attempts,
        fallback=_fb(spec.fallback or "error"), label=spec.name,
    )


def simulate(req: schemas.SimulateRequest) -> schemas.SimulateResponse:
    """Run a replication study for the requested design and methods."""
    cfg = DgpConfig(
        case=Case(req.case),
        k=req.k,
        small_size=req.small_size,
        large_size=req.large_size,
        stratum_sizes=tuple(req.stratum_sizes) if req.stratum_sizes else None,
        propensity_mode=PropensityMode(req.propensity_mode),
        p=req.p,
        noise_var=req.noise_var,
        linear_outcomes=req.linear_outcomes,
        seed=req.seed,
    )
    n_strata = len(cfg.sizes())
    methods = [_method_criterion(spec, req.p, n_strata) for spec in req.methods]
    result = run_study(
        cfg, methods, reps=req.reps, alpha=req.alpha,
        law_draws=req.law_draws, threads=req.threads,
    )
    manifest = dict(result.manifest)
    manifest.update(
        {
            "schema_version": schemas.SCHEMA_VERSION,
            "tool": "restrat",
            "version": __version__,
            "endpoint": "simulate",
        }
    )
    return schemas.SimulateResponse(
        tau=result.tau,
        metrics=[schemas.MethodMetrics(**m.row()) for m in result.metrics],
        table_text=metrics_table_text(result),
        samples={k: [float(v) for v in vals] for k, vals in result.samples.items()}
        if req.include_samples
        else None,
        manifest=manifest,
    )
