"""Fixed finite populations and stratified complete randomization.

A population is a fixed unit table (covariates, stratum membership,
propensity scores, and optionally potential or observed outcomes); the only
randomness in the framework is the treatment assignment drawn within each
stratum.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .errors import CountExceedsCap, EmptyArm, PopulationError

__all__ = [
    "StratifiedPopulation",
    "Assignment",
    "ValidationReport",
    "validate_population",
    "stratified_randomize",
    "enumerate_assignments",
    "assignment_count",
]

_INTEGRAL_TOL = 1e-9


@dataclass(frozen=True)
class StratifiedPopulation:
    """A fixed population of n units split into K strata.

    covariates     (n, p) matrix of design covariates.
    strata         per-stratum arrays of unit indices into the unit table;
                   together they partition range(n). CSV row order is
                   preserved because strata are index lists, not a reordering.
    propensities   per-stratum treated fraction p_k in (0, 1); n_k * p_k must
                   be an integer for the design to be realizable.
    y1, y0         optional potential outcomes (simulation / oracle mode).
    observed       optional observed outcomes (analysis mode).
    stratum_labels optional display labels, defaulting to "1", "2", ...
    """

    covariates: np.ndarray
    strata: tuple[np.ndarray, ...]
    propensities: np.ndarray
    y1: np.ndarray | None = None
    y0: np.ndarray | None = None
    observed: np.ndarray | None = None
    stratum_labels: tuple[str, ...] | None = None

    def __post_init__(self):
        x = np.asarray(self.covariates, dtype=float)
        if x.ndim == 1:
            x = x.reshape(-1, 1)
        if x.ndim != 2:
            raise PopulationError(f"covariates must be a (n, p) matrix, got shape {x.shape}")
        if not np.all(np.isfinite(x)):
            raise PopulationError("covariates contain non-finite values")
        strata = tuple(np.asarray(s, dtype=np.intp) for s in self.strata)
        props = np.asarray(self.propensities, dtype=float)
        n = x.shape[0]
        if len(strata) == 0:
            raise PopulationError("population needs at least one stratum")
        if props.shape != (len(strata),):
            raise PopulationError(
                f"expected {len(strata)} propensities, got shape {props.shape}"
            )
        seen = np.zeros(n, dtype=bool)
        for k, idx in enumerate(strata):
            if idx.size == 0:
                raise PopulationError(f"stratum {k} is empty")
            if idx.min() < 0 or idx.max() >= n:
                raise PopulationError(f"stratum {k} has out-of-range unit indices")
            if seen[idx].any():
                raise PopulationError("strata overlap: a unit appears in two strata")
            seen[idx] = True
        if not seen.all():
            raise PopulationError("some units belong to no stratum")
        if np.any(props <= 0.0) or np.any(props >= 1.0):
            raise PopulationError("propensity scores must lie strictly in (0, 1)")
        for name in ("y1", "y0", "observed"):
            arr = getattr(self, name)
            if arr is not None:
                arr = np.asarray(arr, dtype=float)
                if arr.shape != (n,):
                    raise PopulationError(f"{name} must have shape ({n},)")
                if not np.all(np.isfinite(arr)):
                    raise PopulationError(f"{name} contains non-finite values")
                object.__setattr__(self, name, arr)
        labels = self.stratum_labels
        if labels is None:
            labels = tuple(str(k + 1) for k in range(len(strata)))
        elif len(labels) != len(strata):
            raise PopulationError("stratum_labels length must equal the number of strata")
        object.__setattr__(self, "covariates", x)
        object.__setattr__(self, "strata", strata)
        object.__setattr__(self, "propensities", props)
        object.__setattr__(self, "stratum_labels", tuple(labels))

    @property
    def n(self) -> int:
        return self.covariates.shape[0]

    @property
    def p(self) -> int:
        return self.covariates.shape[1]

    @property
    def k(self) -> int:
        return len(self.strata)

    @property
    def sizes(self) -> np.ndarray:
        return np.array([idx.size for idx in self.strata], dtype=np.intp)

    @property
    def weights(self) -> np.ndarray:
        """Stratum proportions pi_k = n_k / n."""
        return self.sizes / self.n

    @property
    def treated_counts(self) -> np.ndarray:
        """n_k1 = p_k * n_k rounded to the nearest integer.

        Use validate_population / require_realizable to confirm the rounding
        is exact before trusting these counts.
        """
        return np.rint(self.sizes * self.propensities).astype(np.intp)

    def has_potentials(self) -> bool:
        return self.y1 is not None and self.y0 is not None

    def require_realizable(self) -> None:
        """Raise PopulationError unless every n_k * p_k is an integer with both arms nonempty."""
        sizes = self.sizes
        exact = sizes * self.propensities
        counts = self.treated_counts
        for k in range(self.k):
            if abs(exact[k] - counts[k]) > _INTEGRAL_TOL * max(1.0, sizes[k]):
                raise PopulationError(
                    f"stratum {self.stratum_labels[k]}: n_k * p_k = {exact[k]:.6g} is not an integer"
                )
            if counts[k] < 1 or counts[k] > sizes[k] - 1:
                raise PopulationError(
                    f"stratum {self.stratum_labels[k]}: design leaves an empty arm"
                )


@dataclass(frozen=True)
class Assignment:
    """A binary treatment vector with per-stratum treated counts fixed by design.

    seed_record carries the provenance of the draw (root seed, stream path,
    attempt number) when the assignment came from a seeded sampler.
    """

    z: np.ndarray
    seed_record: dict | None = None

    def __post_init__(self):
        z = np.asarray(self.z, dtype=np.int8)
        object.__setattr__(self, "z", z)

    @property
    def n(self) -> int:
        return self.z.shape[0]


@dataclass
class ValidationReport:
    """Outcome of validate_population: error- and warning-level findings."""

    errors: list[str] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.errors


def validate_population(pop: StratifiedPopulation) -> ValidationReport:
    """Check design realizability and estimator preconditions.

    Errors: non-integral treated counts, an arm that would be empty, a
    stratum too small to define S_kXX. Warnings: an arm below two units
    (stratum-level variance estimators unavailable) and covariate directions
    with zero variance inside every stratum (singular design covariance).
    """
    report = ValidationReport()
    sizes = pop.sizes
    counts = pop.treated_counts
    exact = sizes * pop.propensities
    for k in range(pop.k):
        label = pop.stratum_labels[k]
        if sizes[k] < 2:
            report.errors.append(f"stratum {label}: fewer than 2 units")
            continue
        if abs(exact[k] - counts[k]) > _INTEGRAL_TOL * max(1.0, sizes[k]):
            report.errors.append(
                f"stratum {label}: n_k * p_k = {exact[k]:.6g} is not an integer"
            )
            continue
        n1 = int(counts[k])
        n0 = int(sizes[k]) - n1
        if n1 < 1 or n0 < 1:
            report.errors.append(f"stratum {label}: an arm would be empty")
            continue
        if min(n1, n0) < 2:
            report.warnings.append(
                f"stratum {label}: an arm has {min(n1, n0)} unit(s);"
                " stratum-level variance estimation is unavailable"
            )
    # A covariate constant within every stratum makes the design covariance singular.
    x = pop.covariates
    for j in range(pop.p):
        if all(np.ptp(x[idx, j]) == 0.0 for idx in pop.strata):
            report.warnings.append(
                f"covariate {j}: zero variance within every stratum; design covariance is singular"
            )
    return report


def stratified_randomize(
    pop: StratifiedPopulation,
    rng: np.random.Generator,
    seed_record: dict | None = None,
) -> Assignment:
    """Complete randomization within each stratum, independently across strata."""
    pop.require_realizable()
    counts = pop.treated_counts
    z = np.zeros(pop.n, dtype=np.int8)
    for k, idx in enumerate(pop.strata):
        perm = rng.permutation(idx.size)
        z[idx[perm[: counts[k]]]] = 1
    return Assignment(z=z, seed_record=seed_record)


def assignment_count(pop: StratifiedPopulation) -> int:
    """Number of distinct assignments: the product of per-stratum binomials."""
    counts = pop.treated_counts
    total = 1
    for k, idx in enumerate(pop.strata):
        total *= math.comb(idx.size, int(counts[k]))
    return total


def enumerate_assignments(
    pop: StratifiedPopulation, cap: int = 1_000_000
) -> Iterator[Assignment]:
    """Yield every valid assignment exactly once, in lexicographic order.

    Raises CountExceedsCap (with the exact count) when the design has more
    than ``cap`` assignments.
    """
    pop.require_realizable()
    total = assignment_count(pop)
    if total > cap:
        raise CountExceedsCap(total, cap)
    counts = pop.treated_counts
    per_stratum = [
        itertools.combinations(idx.tolist(), int(counts[k]))
        for k, idx in enumerate(pop.strata)
    ]
    for combo in itertools.product(*per_stratum):
        z = np.zeros(pop.n, dtype=np.int8)
        for treated in combo:
            z[list(treated)] = 1
        yield Assignment(z=z)


def arm_indices(
    pop: StratifiedPopulation, assignment: Assignment, k: int
) -> tuple[np.ndarray, np.ndarray]:
    """Unit indices of the treated and control arms in stratum k."""
    idx = pop.strata[k]
    z = assignment.z[idx]
    treated = idx[z == 1]
    control = idx[z == 0]
    if treated.size == 0:
        raise EmptyArm(k, 1)
    if control.size == 0:
        raise EmptyArm(k, 0)
    return treated, control
