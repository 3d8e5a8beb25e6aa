"""Command-line front end: fit, select, simulate, check-penalty.

Input matrices are comma-separated CSV (optional single header row, UTF-8);
either raw data (n x p) or a covariance/correlation matrix plus an explicit
--n.  JSON is the canonical output format; CSV is a flattened convenience
view.  Numeric output uses 17 significant digits so round-trips are
lossless, and every artifact embeds the resolved configuration so a run can
be reproduced bit for bit.

Exit codes: 0 success, 1 failed penalty verification, 2 validation error,
3 fit flagged as a Heywood case (output is still written).
"""

from __future__ import annotations

import argparse
import csv
import json
import sys

import numpy as np

from . import __version__
from ._linalg import NotPositiveDefiniteError
from .estimation import FitOptions, fit
from .model import LOG_2PI, SampleMoments, communalities, sample_moments
from .penalties import PenaltySpec, ProbeConfig, verify_existence_conditions
from .selection import SelectionResult, free_parameter_count, information_criteria, select_q
from .simulation import LoadingSetting, SimulationConfig, StudyReport, run_study

FAMILY_ALIASES = {
    "none": "none",
    "loading-trace": "loading_trace",
    "sample-variance": "sample_variance",
    "akaike": "loading_trace",
    "hirose": "sample_variance",
}

_ALIAS_NOTICE = (
    "note: 'akaike' and 'hirose' are aliases for the loading-trace and "
    "sample-variance penalties; the literature attributes the two functional "
    "forms inconsistently, so outputs are labelled by form."
)


class UsageError(Exception):
    """Invalid inputs or flags; mapped to exit code 2."""


def _fmt(value) -> str:
    return f"{value:.17g}"


def _read_matrix(path):
    """Read a CSV matrix, tolerating one optional header row."""
    rows = []
    try:
        with open(path, newline="", encoding="utf-8") as handle:
            for row in csv.reader(handle):
                if not row or all(cell.strip() == "" for cell in row):
                    continue
                rows.append([cell.strip() for cell in row])
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc}") from exc
    if not rows:
        raise UsageError(f"{path} is empty")
    start = 0
    try:
        [float(cell) for cell in rows[0]]
    except ValueError:
        start = 1
        if len(rows) == 1:
            raise UsageError(f"{path} has a header but no data")
    width = len(rows[start])
    data = []
    for row in rows[start:]:
        if len(row) != width:
            raise UsageError(f"{path} has ragged rows")
        try:
            data.append([float(cell) for cell in row])
        except ValueError as exc:
            raise UsageError(f"{path} has non-numeric entries: {exc}") from exc
    return np.array(data, dtype=float)


def _write_matrix_csv(path, matrix):
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        for row in np.atleast_2d(matrix):
            writer.writerow([_fmt(v) for v in row])


def _parse_penalty(family_arg, scaling_arg):
    family = FAMILY_ALIASES.get(family_arg)
    if family is None:
        raise UsageError(f"unknown penalty {family_arg!r}")
    if family_arg in ("akaike", "hirose"):
        print(_ALIAS_NOTICE, file=sys.stderr)
    if family == "none":
        return PenaltySpec.ml()
    if scaling_arg == "soft":
        return PenaltySpec.soft(family)
    if scaling_arg.startswith("vanilla"):
        _, _, rho_part = scaling_arg.partition(":")
        try:
            rho = float(rho_part) if rho_part else 1.0
        except ValueError:
            raise UsageError(f"bad scaling {scaling_arg!r}")
        if rho <= 0:
            raise UsageError("vanilla scaling requires rho > 0")
        return PenaltySpec.vanilla(family, rho)
    raise UsageError(f"unknown scaling {scaling_arg!r} (use soft or vanilla[:RHO])")


def _parse_estimators(text):
    specs = []
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        parts = item.split(":")
        family = parts[0]
        scaling = ":".join(parts[1:]) if len(parts) > 1 else "soft"
        specs.append(_parse_penalty(family, scaling))
    if not specs:
        raise UsageError("no estimators given")
    return tuple(specs)


def _parse_q_grid(text):
    text = text.strip()
    if ".." in text:
        lo, _, hi = text.partition("..")
        try:
            grid = tuple(range(int(lo), int(hi) + 1))
        except ValueError:
            raise UsageError(f"bad q grid {text!r}")
    else:
        try:
            grid = tuple(int(part) for part in text.split(",") if part.strip())
        except ValueError:
            raise UsageError(f"bad q grid {text!r}")
    if not grid:
        raise UsageError("q grid is empty")
    return grid


def _load_moments(args) -> SampleMoments:
    if args.data is not None and args.cov is not None:
        raise UsageError("give either --data or --cov, not both")
    if args.data is not None:
        matrix = _read_matrix(args.data)
        try:
            return sample_moments(matrix)
        except (ValueError, NotPositiveDefiniteError) as exc:
            raise UsageError(str(exc)) from exc
    if args.cov is not None:
        if args.n is None:
            raise UsageError("--cov input requires --n (the sample size)")
        matrix = _read_matrix(args.cov)
        standardized = bool(
            matrix.ndim == 2
            and matrix.shape[0] == matrix.shape[1]
            and np.abs(np.diagonal(matrix) - 1.0).max() <= 1e-10
        )
        try:
            return SampleMoments(
                n=int(args.n),
                mean=np.zeros(matrix.shape[0]),
                cov=matrix,
                standardized=standardized,
            )
        except (ValueError, NotPositiveDefiniteError) as exc:
            raise UsageError(str(exc)) from exc
    raise UsageError("an input matrix is required (--data or --cov)")


def _meta(args, command):
    config = {
        key: value
        for key, value in sorted(vars(args).items())
        if key not in ("func",) and value is not None
    }
    return {"tool": "softfa", "version": __version__, "command": command, "config": config}


def _flatten(obj, prefix=""):
    """Depth-first flattening of a JSON-able artifact into (key, value) rows."""
    items = []
    if isinstance(obj, dict):
        for key, value in obj.items():
            items.extend(_flatten(value, f"{prefix}{key}." if prefix else f"{key}."))
    elif isinstance(obj, (list, tuple)):
        for idx, value in enumerate(obj):
            items.extend(_flatten(value, f"{prefix}{idx}."))
    else:
        items.append((prefix[:-1], obj))
    return items


def _emit(artifact, args):
    if args.format == "json":
        text = json.dumps(artifact, indent=2, sort_keys=True) + "\n"
    else:
        lines = ["key,value"]
        for key, value in _flatten(artifact):
            if isinstance(value, float):
                value = _fmt(value)
            lines.append(f"{key},{value}")
        text = "\n".join(lines) + "\n"
    if args.out in (None, "-"):
        sys.stdout.write(text)
    else:
        with open(args.out, "w", encoding="utf-8") as handle:
            handle.write(text)


def _fit_options(args) -> FitOptions:
    try:
        return FitOptions(
            em_iterations=args.em_iters,
            newton_max_iterations=args.newton_max_iters,
            gradient_tolerance=args.tol,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _kernel_loglik(result, moments):
    return result.loglik + 0.5 * moments.n * moments.p * LOG_2PI


def cmd_fit(args) -> int:
    moments = _load_moments(args)
    if not 1 <= args.q < moments.p:
        raise UsageError(f"--q must be in [1, {moments.p - 1}], got {args.q}")
    spec = _parse_penalty(args.penalty, args.scaling)
    opts = _fit_options(args)
    result = fit(moments, args.q, spec, opts)
    aic, bic = information_criteria(
        _kernel_loglik(result, moments), moments.p, args.q, moments.n
    )
    artifact = {
        "meta": _meta(args, "fit"),
        "n": moments.n,
        "p": moments.p,
        "q": args.q,
        "penalty": spec.label,
        "loadings": result.params.loadings.tolist(),
        "uniquenesses": result.params.uniquenesses.tolist(),
        "communalities": communalities(result.params).tolist(),
        "loglik": result.loglik,
        "penalty_value": result.penalty,
        "penalized_loglik": result.penalized_loglik,
        "aic": aic,
        "bic": bic,
        "k_free_params": free_parameter_count(moments.p, args.q),
        "converged": result.converged,
        "iterations": {"em": result.iterations.em, "newton": result.iterations.newton},
        "max_newton_step": result.max_newton_step,
        "heywood": {
            "flagged": result.heywood.flagged,
            "reasons": sorted(result.heywood.reasons),
            "min_psi": result.heywood.min_psi,
        },
    }
    if args.dump_cov is not None:
        _write_matrix_csv(args.dump_cov, moments.cov)
    _emit(artifact, args)
    return 3 if result.heywood.flagged else 0


def cmd_select(args) -> int:
    moments = _load_moments(args)
    grid = _parse_q_grid(args.q_grid)
    for q in grid:
        if not 1 <= q < moments.p:
            raise UsageError(f"q={q} outside [1, {moments.p - 1}]")
    spec = _parse_penalty(args.penalty, args.scaling)
    opts = _fit_options(args)
    selection = select_q(moments, grid, spec, opts)
    artifact = {
        "meta": _meta(args, "select"),
        "n": moments.n,
        "p": moments.p,
        "penalty": spec.label,
        "rows": [
            {
                "q": row.q,
                "loglik": row.loglik,
                "k_free_params": row.k_free_params,
                "aic": row.aic,
                "bic": row.bic,
                "heywood_flagged": row.heywood_flagged,
            }
            for row in selection.per_q
        ],
        "best_aic": selection.best_aic,
        "best_bic": selection.best_bic,
    }
    _emit(artifact, args)
    return 0


def _study_artifact(report: StudyReport, args) -> dict:
    config = report.config
    estimators = []
    for est in report.estimators:
        entry = {
            "label": est.label,
            "heywood_percent": est.heywood_percent,
            "n_flagged": est.n_flagged,
            "n_used_for_metrics": est.n_used,
        }
        if est.bias is not None:
            entry["bias"] = est.bias.tolist()
            entry["rmse"] = est.rmse.tolist()
            entry["underestimation"] = est.underestimation.tolist()
            entry["mean_abs_bias"] = float(np.abs(est.bias).mean())
            entry["mean_rmse"] = float(est.rmse.mean())
            entry["mean_underestimation"] = float(est.underestimation.mean())
        if est.selection_rates is not None:
            entry["selection_rates"] = {
                criterion: {str(q): rate for q, rate in rates.items()}
                for criterion, rates in est.selection_rates.items()
            }
        estimators.append(entry)
    return {
        "meta": _meta(args, "simulate"),
        "setting": config.setting.name,
        "n": config.n,
        "replicates": config.replicates,
        "seed": config.seed,
        "q_fit": list(config.q_fit) if config.is_selection_study else config.q_fit,
        "truth_unique_elements": report.truth.tolist(),
        "total_fits": report.total_fits,
        "estimators": estimators,
    }


def _write_replicate_csv(report: StudyReport, path):
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(
            [
                "replicate",
                "estimator",
                "heywood_flagged",
                "reasons",
                "min_psi",
                "loglik",
                "converged",
                "best_aic",
                "best_bic",
            ]
        )
        for row in report.rows:
            writer.writerow(
                [
                    row.replicate,
                    row.estimator,
                    int(row.heywood_flagged),
                    "|".join(row.reasons),
                    _fmt(row.min_psi),
                    _fmt(row.loglik),
                    int(row.converged),
                    "" if row.best_aic is None else row.best_aic,
                    "" if row.best_bic is None else row.best_bic,
                ]
            )


def cmd_simulate(args) -> int:
    try:
        setting = LoadingSetting.from_name(args.setting)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    estimators = _parse_estimators(args.estimators)
    q_fit = _parse_q_grid(args.q_grid) if args.q_grid else args.q
    try:
        config = SimulationConfig(
            setting=setting,
            n=args.n,
            estimators=estimators,
            q_fit=q_fit,
            replicates=args.replicates,
            seed=args.seed,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    for q in config.q_fit if config.is_selection_study else (config.q_fit,):
        if not 1 <= q < setting.p:
            raise UsageError(f"q={q} outside [1, {setting.p - 1}]")
    opts = _fit_options(args)
    report = run_study(config, opts, workers=args.threads)
    _emit(_study_artifact(report, args), args)
    if args.per_replicate is not None:
        _write_replicate_csv(report, args.per_replicate)
    return 0


def cmd_check_penalty(args) -> int:
    spec = _parse_penalty(args.penalty, "vanilla:1")
    try:
        probe = ProbeConfig(p=args.p, q=args.q, seed=args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    report = verify_existence_conditions(spec, probe)
    artifact = {
        "meta": _meta(args, "check-penalty"),
        "family": report.family,
        "continuity": "pass" if report.continuity_ok else "fail",
        "boundedness": "pass" if report.boundedness_ok else "fail",
        "divergence": "pass" if report.divergence_ok else "fail",
        "max_grid_value": report.max_grid_value,
        "max_continuity_delta": report.max_continuity_delta,
        "divergence_final_value": report.divergence_final_value,
        "min_sigma_eigenvalue": report.min_sigma_eigenvalue,
    }
    for condition in ("continuity", "boundedness", "divergence"):
        print(f"{condition}: {artifact[condition].upper()}")
    _emit(artifact, args)
    return 0 if report.all_ok else 1


def _add_io_arguments(parser):
    parser.add_argument("--out", default="-", help="output path, or - for stdout")
    parser.add_argument("--format", choices=("json", "csv"), default="json")


def _add_input_arguments(parser):
    parser.add_argument("--data", help="CSV of raw data (n x p)")
    parser.add_argument("--cov", help="CSV of a covariance/correlation matrix")
    parser.add_argument("--n", type=int, help="sample size for --cov input")


def _add_penalty_arguments(parser):
    parser.add_argument(
        "--penalty",
        default="none",
        choices=sorted(FAMILY_ALIASES),
        help="penalty family (akaike/hirose are aliases)",
    )
    parser.add_argument(
        "--scaling",
        default="soft",
        help="penalty scaling: soft (default) or vanilla[:RHO]",
    )


def _add_fit_option_arguments(parser):
    parser.add_argument("--em-iters", type=int, default=100, dest="em_iters")
    parser.add_argument(
        "--newton-max-iters", type=int, default=200, dest="newton_max_iters"
    )
    parser.add_argument("--tol", type=float, default=1e-8)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="softfa",
        description="Heywood-free factor analysis by softly penalised likelihood",
    )
    parser.add_argument("--version", action="version", version=f"softfa {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    fit_parser = sub.add_parser("fit", help="fit one model")
    _add_input_arguments(fit_parser)
    fit_parser.add_argument("--q", type=int, required=True, help="number of factors")
    _add_penalty_arguments(fit_parser)
    _add_fit_option_arguments(fit_parser)
    fit_parser.add_argument("--dump-cov", help="also write the ingested covariance as CSV")
    _add_io_arguments(fit_parser)
    fit_parser.set_defaults(func=cmd_fit)

    select_parser = sub.add_parser("select", help="choose the number of factors")
    _add_input_arguments(select_parser)
    select_parser.add_argument("--q-grid", required=True, help="grid such as 1..5 or 1,2,3")
    _add_penalty_arguments(select_parser)
    _add_fit_option_arguments(select_parser)
    _add_io_arguments(select_parser)
    select_parser.set_defaults(func=cmd_select)

    sim_parser = sub.add_parser("simulate", help="run a Monte Carlo study")
    sim_parser.add_argument("--setting", required=True, help="A3, B3, A5, B5, A8 or B8")
    sim_parser.add_argument("--n", type=int, required=True)
    sim_parser.add_argument("--replicates", type=int, default=1000)
    sim_parser.add_argument("--seed", type=int, default=0)
    sim_parser.add_argument(
        "--estimators",
        required=True,
        help="comma list like none,loading-trace:soft,sample-variance:vanilla:1",
    )
    sim_parser.add_argument("--q", type=int, default=3)
    sim_parser.add_argument("--q-grid", help="selection study grid such as 1..5")
    sim_parser.add_argument("--threads", type=int, default=1)
    sim_parser.add_argument(
        "--per-replicate", help="also write per-replicate outcomes to this CSV"
    )
    _add_fit_option_arguments(sim_parser)
    _add_io_arguments(sim_parser)
    sim_parser.set_defaults(func=cmd_simulate)

    check_parser = sub.add_parser("check-penalty", help="probe penalty existence conditions")
    check_parser.add_argument(
        "--penalty", required=True, choices=sorted(FAMILY_ALIASES)
    )
    check_parser.add_argument("--p", type=int, default=5)
    check_parser.add_argument("--q", type=int, default=2)
    check_parser.add_argument("--seed", type=int, default=1234)
    _add_io_arguments(check_parser)
    check_parser.set_defaults(func=cmd_check_penalty)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse uses exit code 2 for usage errors already
        return int(exc.code or 0)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
