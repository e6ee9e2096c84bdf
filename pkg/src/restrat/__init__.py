"""restrat: design and inference for stratified rerandomized experiments.

Core layers:

- ``numeric``   special functions and SPD solves
- ``design``    populations, stratified randomization, exhaustive enumeration
- ``balance``   design matrices, Mahalanobis criteria, the rerandomizer
- ``inference`` estimators, truncated-normal quantiles, confidence intervals
- ``sim``       replication studies over the benchmark designs
- ``service``   FastAPI wrapper exposing assign/analyze/quantile/simulate
- ``cli``       thin command-line client over the same handlers
"""

from .balance import (
    BalanceCriterion,
    DesignMatrices,
    Fallback,
    Variant,
    build_design_matrices,
    fair_stratum_target,
    mahalanobis_dm,
    mahalanobis_overall,
    mahalanobis_stratum,
    rerandomize,
    tau_x_dm,
    tau_x_hat,
    threshold_for,
)
from .design import (
    Assignment,
    StratifiedPopulation,
    enumerate_assignments,
    stratified_randomize,
    validate_population,
)
from .inference import (
    InferenceReport,
    TruncatedGaussianLaw,
    analyze_assignment,
    ci_sr,
    ci_srrom,
    ci_srrsm,
    nu_quantile,
    nu_quantiles,
    overall_variance_estimators,
    sample_L_pa,
    srrdm_bias,
    stratified_diff_in_means,
    stratum_variance_estimators,
    theoretical_variances,
    v_pa,
)
from .sim import Case, DgpConfig, PropensityMode, generate_population, run_study

__version__ = "0.1.0"

__all__ = [
    "Assignment",
    "BalanceCriterion",
    "Case",
    "DesignMatrices",
    "DgpConfig",
    "Fallback",
    "InferenceReport",
    "PropensityMode",
    "StratifiedPopulation",
    "TruncatedGaussianLaw",
    "Variant",
    "analyze_assignment",
    "build_design_matrices",
    "ci_sr",
    "ci_srrom",
    "ci_srrsm",
    "enumerate_assignments",
    "fair_stratum_target",
    "generate_population",
    "mahalanobis_dm",
    "mahalanobis_overall",
    "mahalanobis_stratum",
    "nu_quantile",
    "nu_quantiles",
    "overall_variance_estimators",
    "rerandomize",
    "run_study",
    "sample_L_pa",
    "srrdm_bias",
    "stratified_diff_in_means",
    "stratified_randomize",
    "stratum_variance_estimators",
    "tau_x_dm",
    "tau_x_hat",
    "theoretical_variances",
    "threshold_for",
    "v_pa",
    "validate_population",
    "__version__",
]
