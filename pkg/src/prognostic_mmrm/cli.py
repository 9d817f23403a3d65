"""Command-line front end.

Six subcommands cover the full workflow: ``fit`` (estimate a treatment effect
from a CSV dataset), ``power`` (planning curves and minimum sample size),
``validate-scores`` (per-visit score-outcome correlations), ``simulate``
(Monte Carlo operating characteristics), ``subsample-study`` (variance of the
adjusted estimator under participant subsampling), and ``ess``
(effective-sample-size arithmetic plus the precision-ordering check).

Every run writes machine-readable artifacts into the ``--output`` directory.
Artifacts embed the resolved configuration, the seed, the tool version, and
the covariance-ladder outcome where a model was fitted; they carry no
timestamps, so identical invocations produce identical bytes.

A JSON ``--config`` file may supply any parameter by its flag name (with
underscores); explicit command-line flags win. Exit codes: 0 success, 1 input
or validation problem, 2 numerical failure, 64 usage error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys

import numpy as np

from ._version import __version__
from .errors import (
    CalibrationError,
    CapacityError,
    ConvergenceError,
    DecompositionError,
    RankError,
    StateError,
    StudyError,
)
from .inference import treatment_effect
from .power_plan import (
    PowerInputs,
    min_sample_size,
    power_curve,
    procova_standard_error,
    reduction_fraction,
)
from .reml_engine import fit_mmrm
from .simulation import (
    ScenarioConfig,
    psd_ordering_check,
    run_study,
    subsample_variance_study,
    taylor_n0,
)
from .simulation import ess as ess_value
from .trial_data import DEFAULT_LADDER, ModelSpec, load_dataset, score_outcome_correlation

_WORKERS_ENV = "PROGNOSTIC_MMRM_WORKERS"

_NUMERICAL_ERRORS = (
    ConvergenceError,
    RankError,
    DecompositionError,
    CalibrationError,
    CapacityError,
    StateError,
    StudyError,
    np.linalg.LinAlgError,
    ArithmeticError,
)


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


# ---------------------------------------------------------------------------
# Plumbing
# ---------------------------------------------------------------------------

def _default_workers() -> int:
    raw = os.environ.get(_WORKERS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _load_config(path) -> dict:
    if path is None:
        return {}
    with open(path, "r", encoding="utf-8") as fh:
        loaded = json.load(fh)
    if not isinstance(loaded, dict):
        raise ValueError(f"config file {path} must hold a JSON object")
    return loaded


def _resolve(args, config: dict, key: str, default=None):
    """Flag value if given, else config-file value, else the default."""
    value = getattr(args, key, None)
    if value is not None:
        return value
    if key in config:
        return config[key]
    return default


def _json_default(obj):
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _write_json(path: str, payload: dict):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _write_csv(path: str, header, rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _envelope(subcommand: str, resolved: dict, seed, ladder_outcome) -> dict:
    return {
        "tool": {"name": "prognostic-mmrm", "version": __version__},
        "subcommand": subcommand,
        "config": resolved,
        "seed": seed,
        "ladder_outcome": ladder_outcome,
    }


def _output_dir(args, config) -> str:
    out = _resolve(args, config, "output")
    if out is None:
        raise ValueError("--output is required")
    os.makedirs(out, exist_ok=True)
    return out


def _parse_int_list(text) -> tuple:
    if text in (None, ""):
        return ()
    if isinstance(text, (list, tuple)):
        return tuple(int(v) for v in text)
    return tuple(int(part) for part in str(text).split(",") if part.strip() != "")


def _parse_name_list(text):
    if text in (None, ""):
        return None
    if isinstance(text, (list, tuple)):
        return tuple(str(v) for v in text)
    return tuple(part.strip() for part in str(text).split(",") if part.strip() != "")


# ---------------------------------------------------------------------------
# Subcommand handlers
# ---------------------------------------------------------------------------

def _cmd_fit(args) -> int:
    config = _load_config(args.config)
    input_path = _resolve(args, config, "input")
    if input_path is None:
        raise ValueError("--input is required")
    out = _output_dir(args, config)
    flavor = _resolve(args, config, "flavor", "sandwich")
    alpha = float(_resolve(args, config, "alpha", 0.05))
    df_method = _resolve(args, config, "df_method", "satterthwaite")
    no_prognostic = bool(_resolve(args, config, "no_prognostic", False))
    baseline = _parse_int_list(_resolve(args, config, "adjust_baseline", ""))
    ladder_text = _resolve(args, config, "ladder")
    ladder = tuple(_parse_name_list(ladder_text) or DEFAULT_LADDER)
    covariates = _parse_name_list(_resolve(args, config, "covariates"))

    schema = {"covariates": list(covariates)} if covariates else None
    data = load_dataset(input_path, schema)
    spec = ModelSpec(adjust_prognostic=not no_prognostic,
                     adjust_baseline=baseline,
                     covariance_ladder=ladder)
    fit = fit_mmrm(data, spec)
    effect = treatment_effect(fit, flavor=flavor, alpha=alpha, df_method=df_method)

    resolved = {
        "input": input_path, "output": out, "flavor": flavor, "alpha": alpha,
        "df_method": df_method, "no_prognostic": no_prognostic,
        "adjust_baseline": list(baseline), "ladder": list(ladder),
        "covariates": list(covariates) if covariates else None,
    }
    ladder_outcome = {
        "converged_structure": fit.converged_structure,
        "attempts": [list(a) for a in fit.ladder_attempts],
        "n_iterations": fit.n_iterations,
        "final_gradient_norm": fit.final_gradient_norm,
    }
    payload = _envelope("fit", resolved, None, ladder_outcome)
    payload["effect"] = dataclasses.asdict(effect)
    payload["fit"] = {
        "objective_value": fit.objective_value,
        "n_participants": fit.n_participants,
        "n_observations": fit.n_observations,
    }
    _write_json(os.path.join(out, "effect.json"), payload)

    from .inference import sandwich_vcov
    robust = sandwich_vcov(fit)
    rows = [
        (label, repr(float(b)), repr(float(np.sqrt(fit.model_vcov[j, j]))),
         repr(float(np.sqrt(max(robust[j, j], 0.0)))))
        for j, (label, b) in enumerate(zip(fit.beta_labels, fit.beta))
    ]
    _write_csv(os.path.join(out, "coefficients.csv"),
               ("label", "estimate", "model_se", "sandwich_se"), rows)
    print(f"effect {effect.estimate:.6g} (se {effect.se:.6g}, df {effect.df:.2f}, "
          f"p {effect.p_value:.4g}) via {fit.converged_structure}")
    return 0


def _cmd_power(args) -> int:
    config = _load_config(args.config)
    out = _output_dir(args, config)
    r = _resolve(args, config, "r")
    if r is None:
        raise ValueError("--r (validated correlation) is required")
    inputs = PowerInputs(
        n=None,
        d=float(_resolve(args, config, "d", 0.0)),
        gamma=float(_resolve(args, config, "gamma", 1.0)),
        sigma=float(_resolve(args, config, "sigma", 1.0)),
        lam=float(_resolve(args, config, "lam", 1.0)),
        r=float(r),
        alpha=float(_resolve(args, config, "alpha", 0.05)),
        beta_target=float(_resolve(args, config, "beta_target", 0.0)),
    )
    target_power = float(_resolve(args, config, "target_power", 0.80))
    n_min = int(_resolve(args, config, "n_min", 100))
    n_max = int(_resolve(args, config, "n_max", 1000))
    step = int(_resolve(args, config, "step", 100))

    resolved = {
        "output": out, "d": inputs.d, "gamma": inputs.gamma, "sigma": inputs.sigma,
        "lam": inputs.lam, "r": inputs.r, "alpha": inputs.alpha,
        "beta_target": inputs.beta_target, "target_power": target_power,
        "n_min": n_min, "n_max": n_max, "step": step,
    }
    payload = _envelope("power", resolved, None, None)
    payload["reduction_fraction"] = reduction_fraction(inputs.lam, inputs.r)
    if inputs.beta_target != 0.0:
        min_n = min_sample_size(inputs, target_power)
        at_min = dataclasses.replace(inputs, n=min_n)
        payload["min_n"] = min_n
        payload["nu_at_min_n"] = procova_standard_error(at_min)
        curve = power_curve(inputs, (n_min, n_max), step)
        _write_csv(os.path.join(out, "power_curve.csv"), ("n", "power"),
                   [(n, repr(p)) for n, p in curve])
    else:
        payload["min_n"] = None
        payload["nu_at_min_n"] = None
    _write_json(os.path.join(out, "plan.json"), payload)
    if payload["min_n"] is not None:
        print(f"minimum n {payload['min_n']} (reduction fraction "
              f"{payload['reduction_fraction']:.4f})")
    else:
        print(f"reduction fraction {payload['reduction_fraction']:.4f}")
    return 0


def _cmd_validate_scores(args) -> int:
    config = _load_config(args.config)
    input_path = _resolve(args, config, "input")
    if input_path is None:
        raise ValueError("--input is required")
    out = _output_dir(args, config)
    arm = _resolve(args, config, "arm")
    arm = None if arm is None else int(arm)
    fmt = _resolve(args, config, "format", "json")
    covariates = _parse_name_list(_resolve(args, config, "covariates"))
    schema = {"covariates": list(covariates)} if covariates else None

    data = load_dataset(input_path, schema)
    rows = []
    for visit in range(data.schedule.visit_count):
        label = data.schedule.visit_labels[visit]
        try:
            value = score_outcome_correlation(data, visit, arm_filter=arm)
            rows.append({"visit": visit + 1, "label": label,
                         "correlation": value, "note": ""})
        except ValueError as exc:
            rows.append({"visit": visit + 1, "label": label,
                         "correlation": None, "note": str(exc)})

    resolved = {"input": input_path, "output": out, "arm": arm, "format": fmt,
                "covariates": list(covariates) if covariates else None}
    if fmt == "csv":
        _write_csv(os.path.join(out, "correlations.csv"),
                   ("visit", "label", "correlation", "note"),
                   [(r["visit"], r["label"],
                     "" if r["correlation"] is None else repr(r["correlation"]),
                     r["note"]) for r in rows])
    else:
        payload = _envelope("validate-scores", resolved, None, None)
        payload["correlations"] = rows
        _write_json(os.path.join(out, "correlations.json"), payload)
    usable = [r for r in rows if r["correlation"] is not None]
    print(f"{len(usable)} of {len(rows)} visits with a computable correlation")
    return 0


def _cmd_simulate(args) -> int:
    config = _load_config(args.config)
    out = _output_dir(args, config)
    kind = _resolve(args, config, "kind")
    if kind is None:
        raise ValueError("--kind is required")
    scenario = ScenarioConfig(
        kind=str(kind),
        n_per_arm=int(_resolve(args, config, "n_per_arm", 1000)),
        true_effect=float(_resolve(args, config, "true_effect", -1.2)),
        target_correlation=float(_resolve(args, config, "target_correlation", 0.5)),
        dropout_target=float(_resolve(args, config, "dropout_target", 0.30)),
        replicates=int(_resolve(args, config, "replicates", 2500)),
        base_seed=int(_resolve(args, config, "seed", 0)),
    )
    workers = int(_resolve(args, config, "workers", _default_workers()))
    audit = bool(_resolve(args, config, "audit_replicates", False))

    report = run_study(scenario, workers=workers)

    structures = {}
    for name in ("mmrm", "procova"):
        counts = {}
        for rep in report.replicates:
            outcome = getattr(rep, name)
            if outcome is not None:
                counts[outcome.structure] = counts.get(outcome.structure, 0) + 1
        structures[name] = dict(sorted(counts.items()))

    resolved = dataclasses.asdict(scenario)
    resolved.update({"output": out, "workers": workers, "audit_replicates": audit})
    payload = _envelope("simulate", resolved, scenario.base_seed, structures)
    payload["true_effect"] = report.true_effect
    payload["n_replicates"] = report.n_replicates
    payload["n_failures"] = report.n_failures
    payload["methods"] = {
        summary.method: {
            "mean_estimate": summary.mean_estimate,
            "bias": summary.bias,
            "average_variance": summary.average_variance,
            "coverage": summary.coverage,
            "rejection_rate": summary.rejection_rate,
        }
        for summary in (report.mmrm, report.procova)
    }
    _write_json(os.path.join(out, "report.json"), payload)
    _write_csv(
        os.path.join(out, "report.csv"),
        ("method", "mean_estimate", "bias", "average_variance", "coverage",
         "rejection_rate"),
        [(s.method, repr(s.mean_estimate), repr(s.bias), repr(s.average_variance),
          repr(s.coverage), repr(s.rejection_rate))
         for s in (report.mmrm, report.procova)],
    )
    if audit:
        rows = []
        for rep in report.replicates:
            for name in ("mmrm", "procova"):
                outcome = getattr(rep, name)
                if outcome is None:
                    rows.append((rep.replicate, name, "", "", "", "", "", "",
                                 rep.error or ""))
                else:
                    rows.append((rep.replicate, name, repr(outcome.estimate),
                                 repr(outcome.variance), repr(outcome.ci_low),
                                 repr(outcome.ci_high), int(outcome.reject),
                                 outcome.structure, ""))
        _write_csv(os.path.join(out, "replicates.csv"),
                   ("replicate", "method", "estimate", "variance", "ci_low",
                    "ci_high", "reject", "structure", "error"), rows)
    print(f"{scenario.kind}: MMRM rejection {report.mmrm.rejection_rate:.3f}, "
          f"adjusted rejection {report.procova.rejection_rate:.3f}, "
          f"{report.n_failures} failures")
    return 0


def _cmd_subsample_study(args) -> int:
    config = _load_config(args.config)
    input_path = _resolve(args, config, "input")
    if input_path is None:
        raise ValueError("--input is required")
    out = _output_dir(args, config)
    fraction = _resolve(args, config, "fraction")
    if fraction is None:
        raise ValueError("--fraction is required")
    fraction = float(fraction)
    reps = int(_resolve(args, config, "reps", 1000))
    seed = int(_resolve(args, config, "seed", 0))
    covariates = _parse_name_list(_resolve(args, config, "covariates"))
    schema = {"covariates": list(covariates)} if covariates else None

    data = load_dataset(input_path, schema)
    result = subsample_variance_study(data, fraction, reps, seed)

    resolved = {"input": input_path, "output": out, "fraction": fraction,
                "reps": reps, "seed": seed,
                "covariates": list(covariates) if covariates else None}
    payload = _envelope("subsample-study", resolved, seed, None)
    payload["result"] = {
        "mean_variance": result.mean_variance,
        "sd_variance": result.sd_variance,
        "full_data_unadjusted_variance": result.full_data_unadjusted_variance,
        "n_failures": result.n_failures,
        "reps": result.reps,
        "fraction": result.fraction,
    }
    _write_json(os.path.join(out, "subsample.json"), payload)
    print(f"mean adjusted variance {result.mean_variance:.6g} vs full unadjusted "
          f"{result.full_data_unadjusted_variance:.6g}")
    return 0


def _cmd_ess(args) -> int:
    config = _load_config(args.config)
    out = _output_dir(args, config)
    v_benchmark = _resolve(args, config, "v_benchmark")
    v_new = _resolve(args, config, "v_new")
    n = _resolve(args, config, "n")
    if v_benchmark is None or v_new is None or n is None:
        raise ValueError("--v-benchmark, --v-new, and --n are required")
    v_benchmark, v_new, n = float(v_benchmark), float(v_new), float(n)
    taylor_n0_arg = _resolve(args, config, "taylor_n0")
    taylor_slope = _resolve(args, config, "taylor_slope")
    input_path = _resolve(args, config, "input")
    covariates = _parse_name_list(_resolve(args, config, "covariates"))

    resolved = {
        "output": out, "v_benchmark": v_benchmark, "v_new": v_new, "n": n,
        "taylor_n0": None if taylor_n0_arg is None else float(taylor_n0_arg),
        "taylor_slope": None if taylor_slope is None else float(taylor_slope),
        "input": input_path,
        "covariates": list(covariates) if covariates else None,
    }
    payload = _envelope("ess", resolved, None, None)
    payload["ess"] = ess_value(v_benchmark, v_new, n)

    if taylor_n0_arg is not None:
        if taylor_slope is None:
            raise ValueError("--taylor-slope is required with --taylor-n0")
        slope = float(taylor_slope)
        payload["taylor_n0"] = taylor_n0(
            float(taylor_n0_arg), n, v_benchmark,
            lambda m: slope * m, lambda m: slope,
        )
    else:
        payload["taylor_n0"] = None

    if input_path is not None:
        schema = {"covariates": list(covariates)} if covariates else None
        data = load_dataset(input_path, schema)
        report = psd_ordering_check(data, ModelSpec())
        payload["psd_ordering"] = {
            "min_eigenvalue": report.min_eigenvalue,
            "full_variance": report.full_variance,
            "complete_case_variance": report.complete_case_variance,
            "n_participants": report.n_participants,
            "n_complete": report.n_complete,
            "psi_fitted": report.psi_fitted,
        }
    else:
        payload["psd_ordering"] = None

    _write_json(os.path.join(out, "ess_report.json"), payload)
    print(f"ess {payload['ess']:.6g}")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _add_common(sub):
    sub.add_argument("--output", help="directory for artifacts")
    sub.add_argument("--config", help="JSON file of parameter defaults")


def _build_parser() -> _Parser:
    parser = _Parser(prog="prognostic-mmrm",
                     description="Score-adjusted repeated-measures analysis toolkit")
    subs = parser.add_subparsers(dest="subcommand", parser_class=_Parser)

    fit = subs.add_parser("fit", help="fit a dataset and report the treatment effect")
    _add_common(fit)
    fit.add_argument("--input", help="trial dataset CSV")
    fit.add_argument("--flavor", choices=("model", "sandwich"))
    fit.add_argument("--alpha", type=float)
    fit.add_argument("--df-method", dest="df_method",
                     choices=("satterthwaite", "residual"))
    fit.add_argument("--no-prognostic", dest="no_prognostic", action="store_true",
                     default=None, help="drop the score adjustment")
    fit.add_argument("--adjust-baseline", dest="adjust_baseline",
                     help="comma-separated baseline covariate indices")
    fit.add_argument("--ladder", help="comma-separated covariance structures")
    fit.add_argument("--covariates", help="comma-separated covariate column names")
    fit.set_defaults(func=_cmd_fit)

    power = subs.add_parser("power", help="power curve and minimum sample size")
    _add_common(power)
    power.add_argument("--n", type=int)
    power.add_argument("--d", type=float, help="dropout proportion")
    power.add_argument("--gamma", type=float, help="sd inflation factor")
    power.add_argument("--sigma", type=float, help="outcome sd")
    power.add_argument("--lam", type=float, help="correlation deflation factor")
    power.add_argument("--r", type=float, help="validated correlation")
    power.add_argument("--alpha", type=float)
    power.add_argument("--beta-target", dest="beta_target", type=float,
                       help="target treatment effect")
    power.add_argument("--target-power", dest="target_power", type=float)
    power.add_argument("--n-min", dest="n_min", type=int)
    power.add_argument("--n-max", dest="n_max", type=int)
    power.add_argument("--step", type=int)
    power.set_defaults(func=_cmd_power)

    scores = subs.add_parser("validate-scores",
                             help="per-visit score-outcome correlations")
    _add_common(scores)
    scores.add_argument("--input", help="trial dataset CSV")
    scores.add_argument("--arm", type=int, choices=(0, 1))
    scores.add_argument("--format", choices=("json", "csv"))
    scores.add_argument("--covariates", help="comma-separated covariate column names")
    scores.set_defaults(func=_cmd_validate_scores)

    sim = subs.add_parser("simulate", help="Monte Carlo operating characteristics")
    _add_common(sim)
    sim.add_argument("--kind", help="scenario kind")
    sim.add_argument("--n-per-arm", dest="n_per_arm", type=int)
    sim.add_argument("--true-effect", dest="true_effect", type=float)
    sim.add_argument("--target-correlation", dest="target_correlation", type=float)
    sim.add_argument("--dropout-target", dest="dropout_target", type=float)
    sim.add_argument("--replicates", type=int)
    sim.add_argument("--seed", type=int, help="base seed")
    sim.add_argument("--workers", type=int,
                     help=f"process count (default ${_WORKERS_ENV} or 1)")
    sim.add_argument("--audit-replicates", dest="audit_replicates",
                     action="store_true", default=None,
                     help="also write per-replicate rows")
    sim.set_defaults(func=_cmd_simulate)

    sub = subs.add_parser("subsample-study",
                          help="adjusted-model variance under subsampling")
    _add_common(sub)
    sub.add_argument("--input", help="trial dataset CSV")
    sub.add_argument("--fraction", type=float)
    sub.add_argument("--reps", type=int)
    sub.add_argument("--seed", type=int)
    sub.add_argument("--covariates", help="comma-separated covariate column names")
    sub.set_defaults(func=_cmd_subsample_study)

    ess_cmd = subs.add_parser("ess", help="effective-sample-size report")
    _add_common(ess_cmd)
    ess_cmd.add_argument("--v-benchmark", dest="v_benchmark", type=float)
    ess_cmd.add_argument("--v-new", dest="v_new", type=float)
    ess_cmd.add_argument("--n", type=float, help="benchmark sample size")
    ess_cmd.add_argument("--taylor-n0", dest="taylor_n0", type=float,
                         help="expansion point for the control-arm correction")
    ess_cmd.add_argument("--taylor-slope", dest="taylor_slope", type=float,
                         help="slope of a linear precision function")
    ess_cmd.add_argument("--input",
                         help="dataset CSV for the precision-ordering check")
    ess_cmd.add_argument("--covariates",
                         help="comma-separated covariate column names")
    ess_cmd.set_defaults(func=_cmd_ess)

    return parser


def run(argv=None) -> int:
    """Parse arguments, dispatch, and map failures to exit codes."""
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 64
    except SystemExit as exc:  # --help and friends
        code = exc.code
        return int(code) if code else 0
    if getattr(args, "func", None) is None:
        print("usage error: a subcommand is required (try --help)", file=sys.stderr)
        return 64
    try:
        return args.func(args)
    except _NUMERICAL_ERRORS as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main():
    sys.exit(run(sys.argv[1:]))
