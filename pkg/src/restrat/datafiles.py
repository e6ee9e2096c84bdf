"""CSV unit tables, study config files, and JSON report serialization.

CSV dialect: comma separated, UTF-8, header row required, ``.`` decimal.
Covariate columns are auto-detected by the ``x_`` prefix unless an explicit
column list is given. Study configs are INI-style sectioned key/value files
read with configparser.
"""

from __future__ import annotations

import configparser
import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .design import StratifiedPopulation
from .errors import ParseError, PopulationError

__all__ = [
    "UnitTable",
    "read_units_csv",
    "write_units_csv",
    "population_from_table",
    "read_config",
    "json_dumps",
]

RESERVED_COLUMNS = {"unit_id", "stratum", "treated", "outcome"}


@dataclass
class UnitTable:
    """Parsed unit-level records in original row order."""

    unit_ids: list[str]
    strata_labels: list[str]
    covariates: np.ndarray
    covariate_names: list[str]
    treated: np.ndarray | None = None
    outcome: np.ndarray | None = None
    extra_columns: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return len(self.unit_ids)


def _parse_float(value: str, row: int, column: str) -> float:
    try:
        return float(value)
    except ValueError as exc:
        raise ParseError(f"row {row}: column {column!r} is not a number: {value!r}") from exc


def read_units_csv(path, covariates: list[str] | None = None) -> UnitTable:
    """Read a unit table; raises ParseError on malformed input."""
    try:
        with open(path, newline="", encoding="utf-8") as handle:
            reader = csv.DictReader(handle)
            if reader.fieldnames is None:
                raise ParseError(f"{path}: empty file or missing header row")
            fields = [f.strip() for f in reader.fieldnames]
            rows = list(reader)
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc}") from exc
    except csv.Error as exc:
        raise ParseError(f"{path}: CSV parse failure: {exc}") from exc

    if "stratum" not in fields:
        raise ParseError(f"{path}: missing required column 'stratum'")
    if covariates is None:
        covariate_names = [f for f in fields if f.startswith("x_")]
    else:
        covariate_names = list(covariates)
        missing = [c for c in covariate_names if c not in fields]
        if missing:
            raise ParseError(f"{path}: covariate columns not found: {missing}")
    if not covariate_names:
        raise ParseError(
            f"{path}: no covariate columns (use the x_ prefix or pass an explicit list)"
        )

    has_id = "unit_id" in fields
    has_treated = "treated" in fields
    has_outcome = "outcome" in fields
    n = len(rows)
    if n == 0:
        raise ParseError(f"{path}: no data rows")

    unit_ids = []
    strata = []
    x = np.empty((n, len(covariate_names)))
    treated = np.empty(n, dtype=np.int8) if has_treated else None
    outcome = np.empty(n) if has_outcome else None
    extras = {
        f: []
        for f in fields
        if f not in RESERVED_COLUMNS and f not in covariate_names
    }
    for i, row in enumerate(rows):
        if None in row:
            raise ParseError(f"{path}: row {i + 2} has more fields than the header")
        if any(v is None for v in row.values()):
            raise ParseError(f"{path}: row {i + 2} has fewer fields than the header")
        unit_ids.append(row["unit_id"].strip() if has_id else str(i + 1))
        label = row["stratum"].strip()
        if not label:
            raise ParseError(f"{path}: row {i + 2} has an empty stratum label")
        strata.append(label)
        for j, name in enumerate(covariate_names):
            x[i, j] = _parse_float(row[name], i + 2, name)
        if has_treated:
            value = row["treated"].strip()
            if value not in ("0", "1"):
                raise ParseError(f"{path}: row {i + 2}: treated must be 0 or 1, got {value!r}")
            treated[i] = int(value)
        if has_outcome:
            outcome[i] = _parse_float(row["outcome"], i + 2, "outcome")
        for f in extras:
            extras[f].append(row[f])
    return UnitTable(
        unit_ids=unit_ids,
        strata_labels=strata,
        covariates=x,
        covariate_names=covariate_names,
        treated=treated,
        outcome=outcome,
        extra_columns=extras,
    )


def write_units_csv(path, table: UnitTable, treated: np.ndarray | None = None) -> None:
    """Write the table back out, optionally with a (new) treated column."""
    treated_col = treated if treated is not None else table.treated
    fields = ["unit_id", "stratum"]
    if treated_col is not None:
        fields.append("treated")
    if table.outcome is not None:
        fields.append("outcome")
    fields += table.covariate_names
    fields += list(table.extra_columns)
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(fields)
        for i in range(table.n):
            row = [table.unit_ids[i], table.strata_labels[i]]
            if treated_col is not None:
                row.append(int(treated_col[i]))
            if table.outcome is not None:
                row.append(repr(float(table.outcome[i])))
            row += [repr(float(v)) for v in table.covariates[i]]
            row += [table.extra_columns[f][i] for f in table.extra_columns]
            writer.writerow(row)


def population_from_table(
    table: UnitTable, propensities: dict[str, float] | float | None = None
) -> StratifiedPopulation:
    """Build a population from parsed records.

    Stratum order follows first appearance in the file. Propensities come
    from the argument (a scalar for all strata or a label-to-value mapping) or
    are inferred from the treated column; when both are present they must
    agree on the per-stratum treated counts.
    """
    order: list[str] = []
    groups: dict[str, list[int]] = {}
    for i, label in enumerate(table.strata_labels):
        if label not in groups:
            groups[label] = []
            order.append(label)
        groups[label].append(i)
    strata = tuple(np.array(groups[label], dtype=np.intp) for label in order)

    inferred = None
    if table.treated is not None:
        inferred = np.array(
            [table.treated[idx].sum() / idx.size for idx in strata]
        )
    if propensities is None:
        if inferred is None:
            raise PopulationError(
                "no propensities given and no treated column to infer them from"
            )
        props = inferred
    elif np.isscalar(propensities):
        props = np.full(len(strata), float(propensities))
    else:
        try:
            props = np.array([float(propensities[label]) for label in order])
        except KeyError as exc:
            raise PopulationError(f"no propensity given for stratum {exc.args[0]!r}") from exc
    if inferred is not None and propensities is not None:
        counts = np.array([t.size for t in strata]) * props
        actual = np.array([table.treated[idx].sum() for idx in strata])
        if np.any(np.abs(counts - actual) > 1e-9):
            bad = order[int(np.argmax(np.abs(counts - actual)))]
            raise PopulationError(
                f"stratum {bad!r}: treated counts disagree with the supplied propensity"
            )
    return StratifiedPopulation(
        covariates=table.covariates,
        strata=strata,
        propensities=props,
        observed=table.outcome,
        stratum_labels=tuple(order),
    )


def read_config(path) -> dict[str, dict[str, str]]:
    """Read an INI-style config into {section: {key: value}}."""
    parser = configparser.ConfigParser()
    try:
        with open(path, encoding="utf-8") as handle:
            parser.read_file(handle)
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc}") from exc
    except configparser.Error as exc:
        raise ParseError(f"{path}: config parse failure: {exc}") from exc
    return {section: dict(parser.items(section)) for section in parser.sections()}


def _convert(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    raise TypeError(f"not JSON serializable: {type(obj)!r}")


def json_dumps(obj, indent: int = 2) -> str:
    """JSON with shortest-round-trip floats (bit-exact on reparse)."""
    return json.dumps(obj, indent=indent, default=_convert, allow_nan=True)
