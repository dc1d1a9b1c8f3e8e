"""CSV ingestion, run configuration, result serialization and the command
line interface.

Subcommands: ``fit`` (analyze a CSV dataset with one or more methods),
``simulate`` (replication study with operating characteristics) and
``bootstrap`` (percentile band for the dose-response curve). Every run is
driven by a JSON config file; ``--seed``, ``--threads``, ``--out`` and
``--format`` override the config, and the ``EMAXMNAR_THREADS`` environment
variable overrides the configured thread count.

Documented output schemas (stable column order):

* fit tables: ``method,parameter,estimate,std_err,ci_lower,ci_upper,converged,iterations``
  with parameter rows E0, Emax, ED50 and log_ED50 per method, plus a
  missingness coefficient table
  ``method,term,estimate,std_err,z_value,p_value`` for the EM methods.
* simulate tables: ``parameter,method,estimate,mbe,mse,est_se,cp,est_length,s``.
* replicate (plot-data) tables: ``replicate,method,parameter,estimate,se,ci_lower,ci_upper,valid``.
* curve tables: ``dose,method,estimate,ci_lower,ci_upper``.

All floats are serialized with round-trippable formatting (shortest repr,
up to 17 significant digits).
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from dataclasses import dataclass, replace

from scipy import stats

from . import __version__
from .em_engine import EmControls
from .emax_fit import NewtonControls
from .exceptions import ConfigError, DatasetFormatError, EmaxMnarError
from .model_core import EmaxParams, TrialRecord
from .simulate import (
    METHODS,
    BootstrapCurve,
    CurvePoint,
    MetricsRow,
    ReplicateRow,
    SimDesign,
    bootstrap_dose_response,
    fit_by_method,
    replicate_estimates,
    aggregate_metrics,
)

__all__ = [
    "DatasetSchema",
    "RunConfig",
    "parse_dataset",
    "write_dataset",
    "load_config",
    "run",
    "emit_plot_data",
    "main",
    "FIT_TABLE_HEADER",
    "MISSINGNESS_TABLE_HEADER",
    "METRICS_TABLE_HEADER",
    "REPLICATE_TABLE_HEADER",
    "CURVE_TABLE_HEADER",
]

THREADS_ENV_VAR = "EMAXMNAR_THREADS"

FIT_TABLE_HEADER = "method,parameter,estimate,std_err,ci_lower,ci_upper,converged,iterations"
MISSINGNESS_TABLE_HEADER = "method,term,estimate,std_err,z_value,p_value"
METRICS_TABLE_HEADER = "parameter,method,estimate,mbe,mse,est_se,cp,est_length,s"
REPLICATE_TABLE_HEADER = "replicate,method,parameter,estimate,se,ci_lower,ci_upper,valid"
CURVE_TABLE_HEADER = "dose,method,estimate,ci_lower,ci_upper"

_MISSING_TOKENS = ("", "NA")


@dataclass(frozen=True)
class DatasetSchema:
    """Column names of a trial CSV: dose, outcome and covariate columns."""

    dose: str = "dose"
    outcome: str = "outcome"
    covariates: tuple = ()


def parse_dataset(path, schema):
    """Read trial records from a UTF-8 CSV file with a header row.

    The outcome column accepts 0, 1, the empty string or the literal token
    NA (the last two mark a missing response); anything else is an error
    naming the row and column. Doses must be nonnegative reals, covariates
    reals (binary factors pre-coded 0/1).
    """
    records = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        needed = [schema.dose, schema.outcome, *schema.covariates]
        for column in needed:
            if column not in header:
                raise DatasetFormatError(f"{path}: missing required column '{column}'")
        for row_number, row in enumerate(reader, start=2):
            dose = _parse_cell_float(row[schema.dose], path, row_number, schema.dose)
            if dose < 0.0:
                raise DatasetFormatError(
                    f"{path}: row {row_number}, column '{schema.dose}': negative dose {dose}"
                )
            outcome = _parse_outcome(row[schema.outcome], path, row_number, schema.outcome)
            covariates = tuple(
                _parse_cell_float(row[name], path, row_number, name)
                for name in schema.covariates
            )
            records.append(
                TrialRecord(
                    id=len(records), dose=dose, outcome=outcome, covariates=covariates
                )
            )
    return records


def _parse_cell_float(token, path, row_number, column):
    try:
        value = float(str(token).strip())
        if not math.isfinite(value):
            raise ValueError
        return value
    except (TypeError, ValueError):
        raise DatasetFormatError(
            f"{path}: row {row_number}, column '{column}': malformed value {token!r}"
        ) from None


def _parse_outcome(token, path, row_number, column):
    text = str(token).strip() if token is not None else ""
    if text in _MISSING_TOKENS:
        return None
    try:
        value = float(text)
    except ValueError:
        value = None
    if value not in (0.0, 1.0):
        raise DatasetFormatError(
            f"{path}: row {row_number}, column '{column}': outcome must be one of "
            f"0, 1, NA or empty, got {token!r}"
        )
    return int(value)


def write_dataset(records, path, schema):
    """Write trial records to CSV; missing outcomes become the token NA.

    Round-trips losslessly through :func:`parse_dataset`.
    """
    header = [schema.dose, schema.outcome, *schema.covariates]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for rec in records:
            if len(rec.covariates) != len(schema.covariates):
                raise DatasetFormatError(
                    f"record {rec.id} has {len(rec.covariates)} covariates, "
                    f"schema names {len(schema.covariates)}"
                )
            row = [repr(rec.dose)]
            row.append("NA" if rec.missing else str(rec.outcome))
            row.extend(repr(c) for c in rec.covariates)
            writer.writerow(row)


_TOP_LEVEL_KEYS = {
    "mode",
    "input",
    "dose_column",
    "outcome_column",
    "covariate_columns",
    "methods",
    "method",
    "level",
    "seed",
    "threads",
    "out",
    "format",
    "plot_data",
    "em",
    "newton",
    "n",
    "doses",
    "theta_true",
    "alpha_true",
    "replications",
    "bootstrap_samples",
    "dose_grid",
}
_EM_KEYS = {"max_em_iter", "em_tol"}
_NEWTON_KEYS = {"max_iter", "tol", "max_step_halvings", "ridge"}


@dataclass(frozen=True)
class RunConfig:
    """Validated configuration of one CLI run."""

    mode: str
    out: str
    format: str = "csv"
    seed: int = 0
    threads: int = 1
    level: float = 0.95
    input: str | None = None
    dose_column: str = "dose"
    outcome_column: str = "outcome"
    covariate_columns: tuple = ()
    methods: tuple = METHODS
    method: str = "FIL"
    em: EmControls | None = None
    newton: NewtonControls | None = None
    n: int | None = None
    doses: tuple | None = None
    theta_true: tuple | None = None
    alpha_true: tuple | None = None
    replications: int | None = None
    bootstrap_samples: int = 1000
    dose_grid: tuple | None = None
    plot_data: str | None = None

    @property
    def schema(self):
        return DatasetSchema(
            dose=self.dose_column,
            outcome=self.outcome_column,
            covariates=tuple(self.covariate_columns),
        )


def load_config(source):
    """Build a RunConfig from a JSON file path or an already-parsed dict.

    Every unknown key (top level or inside the ``em``/``newton`` blocks) is
    rejected with a diagnostic naming the key.
    """
    if isinstance(source, dict):
        raw = dict(source)
    else:
        try:
            with open(source, encoding="utf-8") as fh:
                raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{source}: not valid JSON ({exc})") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{source}: config must be a JSON object")
    unknown = sorted(set(raw) - _TOP_LEVEL_KEYS)
    if unknown:
        raise ConfigError(f"unknown config key: '{unknown[0]}'")
    mode = raw.get("mode")
    if mode not in ("fit", "simulate", "bootstrap"):
        raise ConfigError(f"config key 'mode' must be fit, simulate or bootstrap, got {mode!r}")
    if "out" not in raw:
        raise ConfigError("config key 'out' is required")

    em = _parse_block(raw.get("em"), _EM_KEYS, "em")
    newton = _parse_block(raw.get("newton"), _NEWTON_KEYS, "newton")
    newton_controls = NewtonControls(**newton) if newton is not None else None
    if em is not None:
        em_controls = EmControls(**em, inner=newton_controls or NewtonControls())
    elif newton_controls is not None:
        em_controls = EmControls(inner=newton_controls)
    else:
        em_controls = None

    methods = raw.get("methods")
    if methods is not None:
        methods = tuple(methods)
        bad = [m for m in methods if m not in METHODS]
        if bad:
            raise ConfigError(f"config key 'methods' has unknown method '{bad[0]}'")
    method = raw.get("method", "FIL")
    if method not in METHODS:
        raise ConfigError(f"config key 'method' has unknown method '{method}'")

    config = RunConfig(
        mode=mode,
        out=str(raw["out"]),
        format=str(raw.get("format", "csv")),
        seed=int(raw.get("seed", 0)),
        threads=int(raw.get("threads", 1)),
        level=float(raw.get("level", 0.95)),
        input=raw.get("input"),
        dose_column=str(raw.get("dose_column", "dose")),
        outcome_column=str(raw.get("outcome_column", "outcome")),
        covariate_columns=tuple(raw.get("covariate_columns", ())),
        methods=methods if methods is not None else METHODS,
        method=method,
        em=em_controls,
        newton=newton_controls,
        n=int(raw["n"]) if "n" in raw else None,
        doses=tuple(raw["doses"]) if "doses" in raw else None,
        theta_true=tuple(raw["theta_true"]) if "theta_true" in raw else None,
        alpha_true=tuple(raw["alpha_true"]) if "alpha_true" in raw else None,
        replications=int(raw["replications"]) if "replications" in raw else None,
        bootstrap_samples=int(raw.get("bootstrap_samples", 1000)),
        dose_grid=tuple(raw["dose_grid"]) if "dose_grid" in raw else None,
        plot_data=raw.get("plot_data"),
    )
    _validate_mode_fields(config)
    return config


def _parse_block(block, allowed, label):
    if block is None:
        return None
    if not isinstance(block, dict):
        raise ConfigError(f"config key '{label}' must be an object")
    unknown = sorted(set(block) - allowed)
    if unknown:
        raise ConfigError(f"unknown config key: '{label}.{unknown[0]}'")
    return dict(block)


def _validate_mode_fields(config):
    if config.format not in ("csv", "json"):
        raise ConfigError(f"config key 'format' must be csv or json, got '{config.format}'")
    if not 0.0 < config.level < 1.0:
        raise ConfigError(f"config key 'level' must lie in (0, 1), got {config.level}")
    if config.seed < 0:
        raise ConfigError(f"config key 'seed' must be nonnegative, got {config.seed}")
    if config.threads < 1:
        raise ConfigError(f"config key 'threads' must be >= 1, got {config.threads}")
    if config.mode in ("fit", "bootstrap") and not config.input:
        raise ConfigError(f"config key 'input' is required in {config.mode} mode")
    if config.mode == "simulate":
        if config.n is None:
            raise ConfigError("config key 'n' is required in simulate mode")
        if config.replications is None:
            raise ConfigError("config key 'replications' is required in simulate mode")
    if config.mode == "bootstrap" and config.bootstrap_samples < 1:
        raise ConfigError(
            f"config key 'bootstrap_samples' must be >= 1, got {config.bootstrap_samples}"
        )


# --- serialization helpers --------------------------------------------------


def _fmt(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header.split(","))
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def _write_json(path, payload):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")


def _sibling_path(path, suffix):
    root, ext = os.path.splitext(path)
    return f"{root}_{suffix}{ext or '.csv'}"


def _theta_rows(report):
    theta = report.theta
    yield ("E0", theta.e0, float(report.se[0]), float(report.ci[0, 0]), float(report.ci[0, 1]))
    yield ("Emax", theta.emax, float(report.se[1]), float(report.ci[1, 0]), float(report.ci[1, 1]))
    yield ("ED50", theta.ed50, float(report.se[2]), float(report.ci[2, 0]), float(report.ci[2, 1]))
    yield (
        "log_ED50",
        report.log_ed50,
        report.se_log_ed50,
        report.ci_log_ed50[0],
        report.ci_log_ed50[1],
    )


def _missingness_terms(alpha_report, config):
    names = ["intercept", *config.covariate_columns, config.dose_column, config.outcome_column]
    terms = []
    for name, est, se in zip(names, alpha_report.alpha.coefficients, alpha_report.se):
        se = float(se)
        z = est / se if se > 0 else math.inf if est != 0 else 0.0
        p = float(2.0 * stats.norm.sf(abs(z))) if math.isfinite(z) else 0.0
        terms.append({"term": name, "estimate": est, "std_err": se, "z_value": z, "p_value": p})
    return terms


def _run_fit(config):
    records = parse_dataset(config.input, config.schema)
    reports = []
    for method in config.methods:
        theta_rep, alpha_rep, emfit = fit_by_method(
            records,
            method,
            em_controls=config.em,
            newton_controls=config.newton,
            level=config.level,
        )
        entry = {
            "method": method,
            "converged": bool(emfit.converged if emfit is not None else theta_rep.converged),
            "iterations": int(theta_rep.iterations),
            "notes": list(theta_rep.notes),
            "parameters": {
                name: {"estimate": est, "std_err": se, "ci": [lo, hi]}
                for name, est, se, lo, hi in _theta_rows(theta_rep)
            },
        }
        if alpha_rep is not None:
            terms = _missingness_terms(alpha_rep, config)
            outcome_term = terms[-1]
            entry["missingness_model"] = {
                "terms": terms,
                "nonignorability": {
                    "term": outcome_term["term"],
                    "estimate": outcome_term["estimate"],
                    "p_value": outcome_term["p_value"],
                },
            }
            print(
                f"{method}: missingness-on-outcome coefficient "
                f"{outcome_term['estimate']:.4g} (p={outcome_term['p_value']:.4g})"
            )
        reports.append(entry)

    if config.format == "json":
        _write_json(config.out, {"mode": "fit", "level": config.level, "reports": reports})
        return
    rows = []
    for entry in reports:
        for name, cell in entry["parameters"].items():
            rows.append(
                (
                    entry["method"],
                    name,
                    cell["estimate"],
                    cell["std_err"],
                    cell["ci"][0],
                    cell["ci"][1],
                    entry["converged"],
                    entry["iterations"],
                )
            )
    _write_csv(config.out, FIT_TABLE_HEADER, rows)
    miss_rows = []
    for entry in reports:
        for term in entry.get("missingness_model", {}).get("terms", ()):
            miss_rows.append(
                (
                    entry["method"],
                    term["term"],
                    term["estimate"],
                    term["std_err"],
                    term["z_value"],
                    term["p_value"],
                )
            )
    if miss_rows:
        _write_csv(_sibling_path(config.out, "missingness"), MISSINGNESS_TABLE_HEADER, miss_rows)


def _design_from_config(config):
    kwargs = {"n": config.n, "seed": config.seed}
    if config.doses is not None:
        kwargs["doses"] = config.doses
    if config.theta_true is not None:
        kwargs["theta_true"] = EmaxParams(*config.theta_true)
    if config.alpha_true is not None:
        kwargs["alpha_true"] = config.alpha_true
    return SimDesign(**kwargs)


def _metrics_payload(metrics):
    return [
        {
            "parameter": m.parameter,
            "method": m.method,
            "estimate": m.estimate,
            "mbe": m.mbe,
            "mse": m.mse,
            "est_se": m.est_se,
            "cp": m.cp,
            "est_length": m.est_length,
            "s": m.s,
        }
        for m in metrics
    ]


def _run_simulate(config):
    design = _design_from_config(config)
    rows = replicate_estimates(
        design,
        config.methods,
        config.replications,
        parallelism=config.threads,
        em_controls=config.em,
        newton_controls=config.newton,
        level=config.level,
    )
    metrics = aggregate_metrics(rows, design)
    if config.format == "json":
        _write_json(config.out, {"mode": "simulate", "metrics": _metrics_payload(metrics)})
    else:
        _write_csv(
            config.out,
            METRICS_TABLE_HEADER,
            [
                (m.parameter, m.method, m.estimate, m.mbe, m.mse, m.est_se, m.cp, m.est_length, m.s)
                for m in metrics
            ],
        )
    if config.plot_data:
        emit_plot_data(rows, config.plot_data, config.format)


def _run_bootstrap(config):
    records = parse_dataset(config.input, config.schema)
    curve = bootstrap_dose_response(
        records,
        method=config.method,
        n_boot=config.bootstrap_samples,
        level=config.level,
        grid=config.dose_grid,
        seed=config.seed,
        parallelism=config.threads,
        em_controls=config.em,
        newton_controls=config.newton,
    )
    print(
        f"{config.method}: {curve.n_boot - curve.n_dropped}/{curve.n_boot} "
        "bootstrap resamples converged"
    )
    if config.format == "json":
        _write_json(
            config.out,
            {
                "mode": "bootstrap",
                "method": curve.method,
                "level": curve.level,
                "n_boot": curve.n_boot,
                "n_dropped": curve.n_dropped,
                "points": [
                    {"dose": p.dose, "estimate": p.estimate, "ci": [p.lower, p.upper]}
                    for p in curve.points
                ],
            },
        )
    else:
        emit_plot_data(curve, config.out, "csv")


def emit_plot_data(rows, path, format="csv"):
    """Write a long-format table for downstream plotting.

    Accepts a list of ReplicateRow (one row per replicate x method x
    parameter), a list of MetricsRow, or a BootstrapCurve / list of
    CurvePoint (one row per dose); see the module docstring for the exact
    headers.
    """
    if isinstance(rows, BootstrapCurve):
        table = [
            (p.dose, rows.method, p.estimate, p.lower, p.upper) for p in rows.points
        ]
        header = CURVE_TABLE_HEADER
    else:
        rows = list(rows)
        if not rows:
            raise ValueError("nothing to emit: empty table")
        if isinstance(rows[0], ReplicateRow):
            header = REPLICATE_TABLE_HEADER
            table = [
                (r.replicate, r.method, r.parameter, r.estimate, r.se, r.lower, r.upper, r.valid)
                for r in rows
            ]
        elif isinstance(rows[0], MetricsRow):
            header = METRICS_TABLE_HEADER
            table = [
                (m.parameter, m.method, m.estimate, m.mbe, m.mse, m.est_se, m.cp, m.est_length, m.s)
                for m in rows
            ]
        elif isinstance(rows[0], CurvePoint):
            header = CURVE_TABLE_HEADER
            table = [(p.dose, "", p.estimate, p.lower, p.upper) for p in rows]
        else:
            raise TypeError(f"cannot emit rows of type {type(rows[0]).__name__}")
    if format == "json":
        keys = header.split(",")
        _write_json(path, [dict(zip(keys, row)) for row in table])
    else:
        _write_csv(path, header, table)


def run(config):
    """Execute one configured run, writing artifacts to ``config.out``.

    Returns exit status 0; errors raise (the CLI wrapper maps them to a
    single-line message and a nonzero exit). Nonconvergence is not an
    error: it is reported through the ``converged`` flags in the output.
    """
    if config.mode == "fit":
        _run_fit(config)
    elif config.mode == "simulate":
        _run_simulate(config)
    elif config.mode == "bootstrap":
        _run_bootstrap(config)
    else:
        raise ConfigError(f"unknown mode '{config.mode}'")
    return 0


def _resolve_threads(flag_value, config):
    if flag_value is not None:
        return flag_value
    env = os.environ.get(THREADS_ENV_VAR)
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(
                f"environment variable {THREADS_ENV_VAR} must be an integer, got {env!r}"
            ) from None
    return config.threads


def main(argv=None):
    """Console entry point."""
    parser = argparse.ArgumentParser(
        prog="emaxmnar",
        description="Binary Emax dose-response fitting with nonignorably missing outcomes",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="mode", required=True)
    helps = {
        "fit": "fit a CSV dataset with one or more methods",
        "simulate": "run a seeded replication study",
        "bootstrap": "bootstrap the dose-response curve",
    }
    for name, help_text in helps.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="path to a JSON run config")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--threads", type=int, help="override the config thread count")
        p.add_argument("--out", help="override the config output path")
        p.add_argument("--format", choices=("csv", "json"), help="override the output format")
    args = parser.parse_args(argv)
    try:
        config = load_config(args.config)
        if config.mode != args.mode:
            raise ConfigError(
                f"config mode '{config.mode}' does not match subcommand '{args.mode}'"
            )
        overrides = {}
        if args.seed is not None:
            overrides["seed"] = args.seed
        overrides["threads"] = _resolve_threads(args.threads, config)
        if args.out is not None:
            overrides["out"] = args.out
        if args.format is not None:
            overrides["format"] = args.format
        config = replace(config, **overrides)
        _validate_mode_fields(config)
        return run(config)
    except (EmaxMnarError, OSError) as exc:
        message = " ".join(str(exc).split())
        print(f"error: {type(exc).__name__}: {message}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
