"""Pydantic request/response models for the service (and the CLI client).

Responses carry ``schema_version`` and a run manifest with every seed,
threshold, and flag needed to reproduce the call.
"""

from __future__ import annotations

from typing import Literal

from pydantic import BaseModel, Field, model_validator

SCHEMA_VERSION = 1

MethodName = Literal["sr", "srrom", "srrsm", "srrdm"]


class UnitIn(BaseModel):
    unit_id: str
    stratum: str
    treated: int | None = Field(default=None, ge=0, le=1)
    outcome: float | None = None
    covariates: list[float]


class AssignRequest(BaseModel):
    units: list[UnitIn]
    method: MethodName = "srrom"
    target_acceptance: float = Field(default=0.001, gt=0.0, le=1.0)
    stratum_targets: dict[str, float] | None = None
    srrsm_mode: Literal["fair", "unfair"] = "fair"
    propensities: dict[str, float] | float | None = None
    seed: int = 0
    max_attempts: int = Field(default=1_000_000, ge=1)
    fallback: Literal["error", "sr"] | None = None
    ridge: float | None = Field(default=None, gt=0.0)
    covariate_names: list[str] | None = None

    @model_validator(mode="after")
    def _nonempty(self):
        if not self.units:
            raise ValueError("units must be nonempty")
        return self


class AssignResponse(BaseModel):
    schema_version: int = SCHEMA_VERSION
    treated: list[int]
    method: MethodName
    attempts: int
    fell_back: bool
    m_overall: float | None = None
    m_strata: list[float | None] | None = None
    thresholds: list[float] | None = None
    target_acceptance: list[float] | None = None
    empirical_acceptance: float | None = None
    notes: list[str] = []
    manifest: dict


class AnalyzeRequest(BaseModel):
    units: list[UnitIn]
    method: Literal["sr", "srrom", "srrsm"] = "srrom"
    alpha: float = Field(default=0.05, gt=0.0, lt=1.0)
    target_acceptance: float = Field(default=0.001, gt=0.0, le=1.0)
    stratum_targets: dict[str, float] | None = None
    srrsm_mode: Literal["fair", "unfair"] = "fair"
    propensities: dict[str, float] | float | None = None
    draws: int = Field(default=200_000, ge=1000)
    seed: int = 0
    r2_override: float | None = Field(default=None, ge=0.0, le=1.0)
    ridge: float | None = Field(default=None, gt=0.0)
    covariate_names: list[str] | None = None


class AnalyzeResponse(BaseModel):
    schema_version: int = SCHEMA_VERSION
    tau_hat: float
    method: str
    variance_estimate: float
    r2_estimate: float | list[float] | None
    ci_lower: float
    ci_upper: float
    alpha: float
    v: float | list[float] | None
    thresholds: list[float] | None
    metadata: dict
    manifest: dict


class MixtureComponent(BaseModel):
    weight: float = Field(ge=0.0)
    r2: float = Field(ge=0.0, le=1.0)
    target_acceptance: float | None = Field(default=None, gt=0.0, le=1.0)
    threshold: float | None = Field(default=None, gt=0.0)

    @model_validator(mode="after")
    def _one_of(self):
        if (self.target_acceptance is None) == (self.threshold is None):
            raise ValueError("give exactly one of target_acceptance or threshold")
        return self


class QuantileRequest(BaseModel):
    p: int = Field(ge=1)
    target_acceptance: float | None = Field(default=None, gt=0.0, le=1.0)
    threshold: float | None = Field(default=None, gt=0.0)
    r2: float | None = Field(default=None, ge=0.0, le=1.0)
    components: list[MixtureComponent] | None = None
    xis: list[float] = Field(default_factory=lambda: [0.025, 0.975])
    draws: int = Field(default=200_000, ge=1000)
    seed: int = 0

    @model_validator(mode="after")
    def _consistent(self):
        if self.components is None:
            if self.r2 is None:
                raise ValueError("give r2 (overall law) or components (mixture law)")
            if (self.target_acceptance is None) == (self.threshold is None):
                raise ValueError("give exactly one of target_acceptance or threshold")
        return self


class QuantileValue(BaseModel):
    xi: float
    value: float
    mc_se: float


class QuantileResponse(BaseModel):
    schema_version: int = SCHEMA_VERSION
    thresholds: list[float]
    v: list[float]
    quantiles: list[QuantileValue]
    manifest: dict


class MethodSpecIn(BaseModel):
    name: str
    variant: MethodName
    target_acceptance: float = Field(default=0.001, gt=0.0, le=1.0)
    srrsm_mode: Literal["fair", "unfair"] = "fair"
    max_attempts: int = Field(default=1_000_000, ge=1)
    fallback: Literal["error", "sr"] | None = None


class SimulateRequest(BaseModel):
    case: Literal[
        "many_small",
        "many_small_plus_two_large",
        "two_large_homogeneous",
        "two_large_heterogeneous",
    ] = "two_large_homogeneous"
    k: int = Field(default=2, ge=1)
    small_size: int = Field(default=10, ge=2)
    large_size: int = Field(default=100, ge=2)
    stratum_sizes: list[int] | None = None
    propensity_mode: Literal["equal", "unequal"] = "equal"
    p: int = Field(default=8, ge=1)
    noise_var: float = Field(default=10.0, ge=0.0)
    linear_outcomes: bool = False
    seed: int = 0
    methods: list[MethodSpecIn] = Field(
        default_factory=lambda: [
            MethodSpecIn(name="SRRoM", variant="srrom"),
            MethodSpecIn(name="SR", variant="sr"),
        ]
    )
    reps: int = Field(default=2000, ge=2)
    alpha: float = Field(default=0.05, gt=0.0, lt=1.0)
    law_draws: int = Field(default=100_000, ge=1000)
    threads: int | None = Field(default=None, ge=1)
    include_samples: bool = False


class MethodMetrics(BaseModel):
    method: str
    reps: int
    bias: float
    sd: float
    rmse: float
    ci_length: float
    cp_percent: float
    fallbacks: int
    errors: int
    mean_attempts: float


class SimulateResponse(BaseModel):
    schema_version: int = SCHEMA_VERSION
    tau: float
    metrics: list[MethodMetrics]
    table_text: str
    samples: dict[str, list[float]] | None = None
    manifest: dict


class HealthResponse(BaseModel):
    status: str
    version: str
