"""Command-line client over the service handlers.

Subcommands mirror the service endpoints: ``assign``, ``analyze``,
``quantile``, and ``simulate`` parse local CSV/config files into the same
request models the HTTP API accepts, call the shared handlers in process, and
write CSV/JSON results plus a run manifest. ``serve`` starts the HTTP
service.

Exit codes: 0 success, 2 input parse failure, 3 validation or parameter
failure, 4 no acceptable assignment within the attempt budget.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np
import pydantic

from . import __version__
from .datafiles import json_dumps, read_config, read_units_csv, write_units_csv
from .errors import (
    AttemptsExhausted,
    DomainError,
    EmptyArm,
    InsufficientArm,
    MissingPotentialOutcomes,
    ParseError,
    PopulationError,
    RestratError,
    SingularCovariance,
)
from .service import handlers, schemas

EXIT_OK = 0
EXIT_PARSE = 2
EXIT_VALIDATION = 3
EXIT_ATTEMPTS = 4

_VALIDATION_ERRORS = (
    PopulationError,
    DomainError,
    InsufficientArm,
    EmptyArm,
    MissingPotentialOutcomes,
    SingularCovariance,
    pydantic.ValidationError,
)


def _units_from_table(table) -> list[schemas.UnitIn]:
    units = []
    for i in range(table.n):
        units.append(
            schemas.UnitIn(
                unit_id=table.unit_ids[i],
                stratum=table.strata_labels[i],
                treated=int(table.treated[i]) if table.treated is not None else None,
                outcome=float(table.outcome[i]) if table.outcome is not None else None,
                covariates=[float(v) for v in table.covariates[i]],
            )
        )
    return units


def _parse_propensities(values: list[str] | None):
    """Either one bare number for all strata or repeated LABEL=VALUE pairs."""
    if not values:
        return None
    if len(values) == 1 and "=" not in values[0]:
        try:
            return float(values[0])
        except ValueError as exc:
            raise DomainError(f"bad propensity value {values[0]!r}") from exc
    mapping = {}
    for item in values:
        label, sep, value = item.partition("=")
        if not sep:
            raise DomainError(f"expected LABEL=VALUE propensity, got {item!r}")
        try:
            mapping[label] = float(value)
        except ValueError as exc:
            raise DomainError(f"bad propensity value in {item!r}") from exc
    return mapping


def _write_json(path: str | None, payload: dict) -> None:
    text = json_dumps(payload)
    if path is None or path == "-":
        print(text)
    else:
        with open(path, "w", encoding="utf-8") as handle:
            handle.write(text + "\n")


def _cmd_assign(args) -> int:
    table = read_units_csv(args.input, covariates=args.covariates)
    if table.treated is not None:
        raise PopulationError(
            f"{args.input}: a treated column is already present; assign refuses to overwrite it"
        )
    req = schemas.AssignRequest(
        units=_units_from_table(table),
        method=args.method,
        target_acceptance=args.pa,
        srrsm_mode="unfair" if args.unfair else "fair",
        propensities=_parse_propensities(args.propensity),
        seed=args.seed,
        max_attempts=args.max_attempts,
        fallback=args.fallback,
        ridge=args.ridge,
        covariate_names=table.covariate_names,
    )
    resp = handlers.assign(req)
    if args.center:
        centered = table.covariates.copy()
        for label in dict.fromkeys(table.strata_labels):
            rows = [i for i, s in enumerate(table.strata_labels) if s == label]
            centered[rows] -= centered[rows].mean(axis=0)
        table.covariates = centered
    write_units_csv(args.out, table, treated=np.array(resp.treated, dtype=np.int8))
    report = resp.model_dump()
    report["output_csv"] = args.out
    _write_json(args.report, report)
    return EXIT_OK


def _cmd_analyze(args) -> int:
    table = read_units_csv(args.input, covariates=args.covariates)
    if table.treated is None:
        raise PopulationError(f"{args.input}: analyze needs a treated column")
    if table.outcome is None:
        raise PopulationError(f"{args.input}: analyze needs an outcome column")
    req = schemas.AnalyzeRequest(
        units=_units_from_table(table),
        method=args.method,
        alpha=args.alpha,
        target_acceptance=args.pa,
        srrsm_mode="unfair" if args.unfair else "fair",
        propensities=_parse_propensities(args.propensity),
        draws=args.draws,
        seed=args.seed,
        r2_override=args.r2,
        ridge=args.ridge,
        covariate_names=table.covariate_names,
    )
    resp = handlers.analyze(req)
    _write_json(args.out, resp.model_dump())
    return EXIT_OK


def _parse_component(text: str) -> schemas.MixtureComponent:
    parts = text.split(":")
    if len(parts) != 3:
        raise DomainError(f"expected WEIGHT:R2:PA component, got {text!r}")
    try:
        weight, r2, pa = (float(v) for v in parts)
    except ValueError as exc:
        raise DomainError(f"bad number in component {text!r}") from exc
    return schemas.MixtureComponent(weight=weight, r2=r2, target_acceptance=pa)


def _cmd_quantile(args) -> int:
    components = [_parse_component(c) for c in args.component] if args.component else None
    req = schemas.QuantileRequest(
        p=args.p,
        target_acceptance=args.pa,
        threshold=args.threshold,
        r2=args.r2,
        components=components,
        xis=args.xi,
        draws=args.draws,
        seed=args.seed,
    )
    resp = handlers.quantile(req)
    _write_json(args.out, resp.model_dump())
    return EXIT_OK


_DESK_PRESETS = {
    "case1-desk": {
        "dgp": {"case": "many_small", "k": "25", "small_size": "10"},
        "study": {"reps": "1000"},
    },
    "case2-desk": {
        "dgp": {"case": "many_small_plus_two_large", "k": "12",
                "small_size": "10", "large_size": "100"},
        "study": {"reps": "1000"},
    },
    "case3-desk": {
        "dgp": {"case": "two_large_homogeneous", "k": "2", "large_size": "200"},
        "study": {"reps": "1000"},
    },
    "case4-desk": {
        "dgp": {"case": "two_large_heterogeneous", "k": "2", "large_size": "200"},
        "study": {"reps": "1000"},
    },
}

_PAPER_SCALE = {
    "case1": {"dgp": {"case": "many_small", "k": "50", "small_size": "10"},
              "study": {"reps": "10000"}},
    "case2": {"dgp": {"case": "many_small_plus_two_large", "k": "22",
                      "small_size": "10", "large_size": "100"},
              "study": {"reps": "10000"}},
    "case3": {"dgp": {"case": "two_large_homogeneous", "k": "2", "large_size": "100"},
              "study": {"reps": "10000"}},
    "case4": {"dgp": {"case": "two_large_heterogeneous", "k": "2", "large_size": "100"},
              "study": {"reps": "10000"}},
}

_DEFAULT_METHODS = {
    "method.SRRoM": {"variant": "srrom", "pa": "0.001"},
    "method.SRRsM(f)": {"variant": "srrsm", "pa": "0.001", "mode": "fair"},
    "method.SR": {"variant": "sr"},
}


def _merge_config(base: dict, extra: dict) -> dict:
    merged = {section: dict(values) for section, values in base.items()}
    for section, values in extra.items():
        merged.setdefault(section, {}).update(values)
    return merged


def _config_to_request(config: dict) -> schemas.SimulateRequest:
    dgp = config.get("dgp", {})
    study = config.get("study", {})

    def as_bool(text):
        return str(text).strip().lower() in ("1", "true", "yes", "on")

    methods = []
    for section, values in config.items():
        if not section.startswith("method"):
            continue
        name = section.partition(".")[2] or values.get("variant", "method")
        methods.append(
            schemas.MethodSpecIn(
                name=name,
                variant=values.get("variant", "srrom"),
                target_acceptance=float(values.get("pa", 0.001)),
                srrsm_mode=values.get("mode", "fair"),
                max_attempts=int(values.get("max_attempts", 1_000_000)),
                fallback=values.get("fallback"),
            )
        )
    if not methods:
        methods = [
            schemas.MethodSpecIn(name=name.partition(".")[2], **{
                "variant": vals["variant"],
                "target_acceptance": float(vals.get("pa", 0.001)),
                "srrsm_mode": vals.get("mode", "fair"),
            })
            for name, vals in _DEFAULT_METHODS.items()
        ]
    sizes = dgp.get("stratum_sizes")
    return schemas.SimulateRequest(
        case=dgp.get("case", "two_large_homogeneous"),
        k=int(dgp.get("k", 2)),
        small_size=int(dgp.get("small_size", 10)),
        large_size=int(dgp.get("large_size", 100)),
        stratum_sizes=[int(s) for s in sizes.split(",")] if sizes else None,
        propensity_mode=dgp.get("propensity_mode", "equal"),
        p=int(dgp.get("p", 8)),
        noise_var=float(dgp.get("noise_var", 10.0)),
        linear_outcomes=as_bool(dgp.get("linear_outcomes", "false")),
        seed=int(dgp.get("seed", 0)),
        methods=methods,
        reps=int(study.get("reps", 2000)),
        alpha=float(study.get("alpha", 0.05)),
        law_draws=int(study.get("law_draws", 100_000)),
        threads=int(study["threads"]) if "threads" in study else None,
        include_samples=as_bool(study.get("include_samples", "false")),
    )


def _cmd_simulate(args) -> int:
    config: dict = {}
    if args.preset:
        if args.preset not in _DESK_PRESETS:
            raise ParseError(
                f"unknown preset {args.preset!r}; choose from {sorted(_DESK_PRESETS)}"
            )
        config = _merge_config(config, _DESK_PRESETS[args.preset])
    if args.config:
        config = _merge_config(config, read_config(args.config))
    if args.paper_scale:
        if args.paper_scale not in _PAPER_SCALE:
            raise ParseError(
                f"unknown paper-scale case {args.paper_scale!r};"
                f" choose from {sorted(_PAPER_SCALE)}"
            )
        config = _merge_config(config, _PAPER_SCALE[args.paper_scale])
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep or "." not in key:
            raise ParseError(f"expected --set SECTION.KEY=VALUE, got {item!r}")
        section, _, name = key.partition(".")
        config.setdefault(section, {})[name] = value
    if args.dump_samples:
        config.setdefault("study", {})["include_samples"] = "true"
    if args.threads is not None:
        config.setdefault("study", {})["threads"] = str(args.threads)

    req = _config_to_request(config)
    resp = handlers.simulate(req)

    os.makedirs(args.out, exist_ok=True)
    metrics_path = os.path.join(args.out, "metrics.json")
    payload = resp.model_dump(exclude={"samples", "table_text"})
    _write_json(metrics_path, payload)
    with open(os.path.join(args.out, "metrics.txt"), "w", encoding="utf-8") as handle:
        handle.write(resp.table_text + "\n")
    _write_json(os.path.join(args.out, "manifest.json"), resp.manifest)
    if resp.samples is not None:
        sample_path = os.path.join(args.out, "samples.csv")
        names = list(resp.samples)
        columns = [resp.samples[name] for name in names]
        with open(sample_path, "w", encoding="utf-8") as handle:
            handle.write(",".join(names) + "\n")
            for row in zip(*columns):
                handle.write(",".join(repr(v) for v in row) + "\n")
    print(resp.table_text)
    return EXIT_OK


def _cmd_serve(args) -> int:
    import uvicorn

    from .service.app import app

    uvicorn.run(app, host=args.host, port=args.port)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="restrat",
        description="Stratified rerandomization: design, analysis, and simulation.",
    )
    parser.add_argument("--version", action="version", version=f"restrat {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    common_units = argparse.ArgumentParser(add_help=False)
    common_units.add_argument("input", help="unit table CSV")
    common_units.add_argument(
        "--covariates", nargs="+", default=None,
        help="explicit covariate columns (default: columns prefixed x_)",
    )
    common_units.add_argument(
        "--propensity", action="append", default=None, metavar="VALUE|LABEL=VALUE",
        help="propensity score for all strata, or one LABEL=VALUE per stratum",
    )
    common_units.add_argument("--pa", type=float, default=0.001,
                              help="target acceptance probability (default 0.001)")
    common_units.add_argument("--unfair", action="store_true",
                              help="stratum-specific targets pa instead of pa^(1/K)")
    common_units.add_argument("--seed", type=int, default=0)
    common_units.add_argument(
        "--ridge", type=float, default=None,
        help="opt-in ridge for a singular design covariance:"
             " adds RIDGE * mean(diag) * I (recorded in the manifest)",
    )

    p_assign = sub.add_parser("assign", parents=[common_units],
                              help="draw one accepted assignment and write it back out")
    p_assign.add_argument("--method", choices=["sr", "srrom", "srrsm", "srrdm"],
                          default="srrom")
    p_assign.add_argument("--out", required=True, help="output CSV with a treated column")
    p_assign.add_argument("--report", default=None,
                          help="sidecar JSON report path (default: stdout)")
    p_assign.add_argument("--max-attempts", type=int, default=1_000_000)
    p_assign.add_argument("--fallback", choices=["error", "sr"], default=None)
    p_assign.add_argument("--center", action="store_true",
                          help="center exported covariate columns at stratum means"
                               " (assignments are unaffected: the balance"
                               " statistics are shift invariant per stratum)")
    p_assign.set_defaults(func=_cmd_assign)

    p_analyze = sub.add_parser("analyze", parents=[common_units],
                               help="estimate the effect with a conservative interval")
    p_analyze.add_argument("--method", choices=["sr", "srrom", "srrsm"], default="srrom")
    p_analyze.add_argument("--alpha", type=float, default=0.05)
    p_analyze.add_argument("--r2", type=float, default=None,
                           help="override the estimated squared correlation (srrom only)")
    p_analyze.add_argument("--draws", type=int, default=200_000)
    p_analyze.add_argument("--out", default=None, help="JSON report path (default: stdout)")
    p_analyze.set_defaults(func=_cmd_analyze)

    p_quantile = sub.add_parser("quantile",
                                help="thresholds and truncated-normal law quantiles")
    p_quantile.add_argument("--p", type=int, required=True, help="covariate dimension")
    p_quantile.add_argument("--pa", type=float, default=None)
    p_quantile.add_argument("--threshold", type=float, default=None)
    p_quantile.add_argument("--r2", type=float, default=None)
    p_quantile.add_argument(
        "--component", action="append", default=None, metavar="WEIGHT:R2:PA",
        help="mixture component; repeat once per stratum",
    )
    p_quantile.add_argument("--xi", type=float, action="append", default=None,
                            help="quantile level; repeatable (default 0.025 0.975)")
    p_quantile.add_argument("--draws", type=int, default=200_000)
    p_quantile.add_argument("--seed", type=int, default=0)
    p_quantile.add_argument("--out", default=None)
    p_quantile.set_defaults(func=_cmd_quantile)

    p_sim = sub.add_parser("simulate", help="run a replication study")
    p_sim.add_argument("config", nargs="?", default=None, help="INI config file")
    p_sim.add_argument("--preset", default=None,
                       help=f"desk-scale preset: {', '.join(sorted(_DESK_PRESETS))}")
    p_sim.add_argument("--paper-scale", default=None, metavar="CASE",
                       help="published-scale settings: case1, case2, case3, case4")
    p_sim.add_argument("--set", action="append", default=None,
                       metavar="SECTION.KEY=VALUE", help="override a config value")
    p_sim.add_argument("--threads", type=int, default=None,
                       help="replication worker threads (default: RESTRAT_THREADS or 1)")
    p_sim.add_argument("--out", required=True, help="output directory")
    p_sim.add_argument("--dump-samples", action="store_true",
                       help="also write per-replication estimator errors as CSV")
    p_sim.set_defaults(func=_cmd_simulate)

    p_serve = sub.add_parser("serve", help="start the HTTP service")
    p_serve.add_argument("--host", default="127.0.0.1")
    p_serve.add_argument("--port", type=int, default=8000)
    p_serve.set_defaults(func=_cmd_serve)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "quantile" and args.xi is None:
        args.xi = [0.025, 0.975]
    try:
        return args.func(args)
    except ParseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except AttemptsExhausted as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ATTEMPTS
    except _VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except RestratError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
