"""Command-line interface.

Exit codes: 0 success, 2 invalid input, 3 estimation failure (degenerate or
empty cells), 4 observable implications violated, 1 anything unexpected.
"""
from __future__ import annotations

import argparse
import datetime as _dt
import json
import os
import sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from .data import read_csv, write_csv
from .diagnostics import check_implications, q_kernel_estimates
from .dml import dml2_generic, make_plan
from .errors import GlivError, ValidationError
from .estimators import (
    ParameterId,
    default_parameters,
    estimate,
    parse_parameters,
    switcher_lasf,
    with_companions,
)
from .gmm import estimate_gmm, spec_from_json
from .nuisance import DEFAULT_TRIM, fit, parse_learner
from .schemas import (
    DerivedRow,
    DmlReportModel,
    DmlRow,
    EqualityRow,
    EstimateReportModel,
    GmmReportModel,
    ImplicationReportModel,
    McRowModel,
    ParameterRow,
    RangeRow,
    RunManifest,
    SimulationReportModel,
    load_report,
)
from .simulation import DEFAULT_TARGETS, DgpSpec, generate, run_monte_carlo
from .typeconfig import load_config

# flags that change where or how fast output is produced, never its content
_EXECUTION_FLAGS = {"out", "table", "influence", "threads", "stamp", "handler", "command", "sample_out"}


def _env_int(name, default):
    raw = os.environ.get(name)
    if raw is None or raw == "":
        return default
    try:
        return int(raw)
    except ValueError:
        raise ValidationError(f"environment variable {name} must be an integer, got {raw!r}") from None


def _float_or_none(v):
    v = float(v)
    return v if np.isfinite(v) else None


def _matrix(m):
    return [[float(v) for v in row] for row in np.atleast_2d(m)]


def _manifest(args, config=None, dataset=None, seed=None):
    flags = {k: v for k, v in sorted(vars(args).items()) if k not in _EXECUTION_FLAGS}
    stamp = _dt.datetime.now(_dt.timezone.utc).isoformat() if getattr(args, "stamp", False) else None
    return RunManifest(command=args.command, config=config, dataset=dataset, flags=flags,
                       seed=seed, version=__version__, timestamp=stamp)


def _emit(args, model, table):
    text = model.model_dump_json(indent=2) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    if args.table:
        Path(args.table).write_text(table + "\n")
    elif args.out:
        sys.stdout.write(table + "\n")


def _load_inputs(args):
    config = load_config(args.config)
    config.require_monotone()
    dataset = read_csv(args.data, config)
    return config, dataset


# -- commands ------------------------------------------------------------------

def cmd_estimate(args):
    config, dataset = _load_inputs(args)
    params = default_parameters(config) if args.params is None else parse_parameters(args.params)
    learner = parse_learner(args.learner)
    nf = fit(dataset, config, learner, args.trim)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        report = estimate(dataset, config, nf, params)
    derived = []
    if args.switchers:
        full = estimate(dataset, config, nf, with_companions(
            [ParameterId.beta(t, k) for t in config.treatments
             for k in range(1, config.n_instruments) if config.partition(t)[k]]), warn=False)
        for t in config.treatments:
            if any(config.partition(t)[k] for k in range(1, config.n_instruments)):
                est, se = switcher_lasf(full, config, t)
                derived.append(DerivedRow(name=f"switchers:{t}", estimate=est, se=se))
    if args.influence:
        header = ",".join(str(p) for p in report.parameters)
        np.savetxt(args.influence, report.influence, delimiter=",", header=header, comments="", fmt="%.17g")
    rows = [ParameterRow(parameter=str(p), estimate=_float_or_none(e), se=_float_or_none(s))
            for p, e, s in zip(report.parameters, report.estimates, report.standard_errors)]
    model = EstimateReportModel(
        manifest=_manifest(args, args.config, args.data), n=dataset.n, learner=str(learner),
        trim_floor=args.trim, rows=rows, covariance=_matrix(report.covariance), v_hat=_matrix(report.v_hat),
        residual_p0={t: float(v) for t, v in report.residual_p0.items()}, derived=derived,
        warnings=[str(w.message) for w in caught],
    )
    lines = [f"{'Parameter':<20}{'Estimate':>12}{'Std Err':>12}", "-" * 44]
    lines += [f"{r.parameter:<20}{r.estimate:>12.4f}{r.se:>12.4f}" for r in rows]
    lines += [f"{d.name:<20}{d.estimate:>12.4f}{d.se:>12.4f}" for d in derived]
    lines += [f"p[{t},0] (residual) {v:>12.4f}" for t, v in report.residual_p0.items()]
    _emit(args, model, "\n".join(lines))
    return 0


def cmd_dml(args):
    config, dataset = _load_inputs(args)
    params = default_parameters(config) if args.params is None else parse_parameters(args.params)
    learner = parse_learner(args.learner)
    seed = args.seed = _env_int("GLIV_SEED", 0) if args.seed is None else args.seed
    plan = make_plan(dataset.n, args.folds, seed)
    rows = []
    for p in params:
        r = dml2_generic(dataset, config, p, plan, learner, args.trim)
        rows.append(DmlRow(parameter=str(p), estimate=r.estimate, variance=r.variance, se=r.se))
    model = DmlReportModel(manifest=_manifest(args, args.config, args.data, seed), n=dataset.n,
                           folds=args.folds, learner=str(learner), trim_floor=args.trim, rows=rows)
    lines = [f"{'Parameter':<20}{'Estimate':>12}{'Std Err':>12}", "-" * 44]
    lines += [f"{r.parameter:<20}{r.estimate:>12.4f}{r.se:>12.4f}" for r in rows]
    _emit(args, model, "\n".join(lines))
    return 0


def cmd_gmm(args):
    config, dataset = _load_inputs(args)
    try:
        raw = json.loads(Path(args.spec).read_text())
    except FileNotFoundError:
        raise ValidationError(f"moment specification {args.spec} not found") from None
    except json.JSONDecodeError as exc:
        raise ValidationError(f"moment specification {args.spec} is not valid JSON: {exc}") from None
    spec = spec_from_json(raw, dataset.y)
    nf = fit(dataset, config, parse_learner(args.learner), args.trim)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        res = estimate_gmm(dataset, config, nf, spec, args.epsilon)
    model = GmmReportModel(
        manifest=_manifest(args, args.config, args.data), n=dataset.n, spec=spec.to_dict(),
        eta_hat=res.eta_hat.tolist(), standard_errors=res.standard_errors.tolist(),
        first_stage_eta=res.first_stage_eta.tolist(), covariance=_matrix(res.covariance),
        V_hat=_matrix(res.V_hat), Gamma_hat=_matrix(res.Gamma_hat), objective_value=res.objective_value,
        first_stage_objective=res.first_stage_objective, epsilon_n=res.epsilon_n,
        pinv_weighting=res.pinv_weighting, notes=list(res.notes), warnings=[str(w.message) for w in caught],
    )
    lines = [f"{'eta':<8}{'Estimate':>12}{'Std Err':>12}{'First stage':>14}", "-" * 46]
    for i, (e, s, f0) in enumerate(zip(res.eta_hat, res.standard_errors, res.first_stage_eta), start=1):
        lines.append(f"{f'eta{i}':<8}{e:>12.6f}{s:>12.6f}{f0:>14.6f}")
    lines.append(f"objective {res.objective_value:.6g} (J={spec.J}, d={spec.d_eta})")
    _emit(args, model, "\n".join(lines))
    return 0


def cmd_test(args):
    config, dataset = _load_inputs(args)
    if args.breakpoints:
        try:
            bins = [float(v) for v in args.breakpoints.split(",") if v.strip()]
        except ValueError:
            raise ValidationError(f"cannot parse breakpoints {args.breakpoints!r}") from None
    else:
        bins = args.bins
    tolerance = args.tolerance
    if tolerance != "auto":
        try:
            tolerance = float(tolerance)
        except ValueError:
            raise ValidationError("tolerance must be 'auto' or a number") from None
    nf = fit(dataset, config, "cells", args.trim)
    report = check_implications(q_kernel_estimates(dataset, config, nf, bins), tolerance)
    model = ImplicationReportModel(
        manifest=_manifest(args, args.config, args.data), note=report.note, passed=report.passed,
        tolerance_mode=report.tolerance_mode, breakpoints=list(report.breakpoints),
        max_violation=report.max_violation, max_discrepancy=report.max_discrepancy,
        n_flagged=len(report.flagged),
        informative_inequalities=[f"Q[{t},{k}] {'>= 0' if s == 'lower' else '<= 1'}" for t, k, s in report.reduced],
        ranges=[RangeRow(t=r.t, k=r.k, bin=r.bin, cell=list(r.cell), q=r.q, se=r.se, violation=r.violation,
                         tolerance=r.tolerance, flagged=r.flagged) for r in report.ranges],
        equalities=[EqualityRow(relation=e.relation, automatic=e.automatic, cell=list(e.cell),
                                discrepancy=e.discrepancy, se=e.se, tolerance=e.tolerance, flagged=e.flagged)
                    for e in report.equalities],
    )
    _emit(args, model, report.table())
    if not report.passed:
        sys.stderr.write(f"observable implications violated in {len(report.flagged)} check(s)\n")
        return 4
    return 0


def cmd_simulate(args):
    seed = args.seed = _env_int("GLIV_SEED", 0) if args.seed is None else args.seed
    threads = _env_int("GLIV_THREADS", 1) if args.threads is None else args.threads
    dgp = DgpSpec(args.dgp, args.n, seed, success_z2=not args.success_z1,
                  defier_share=args.defier_share)
    if args.sample_out:
        ds, _ = generate(dgp, 0)
        write_csv(ds, args.sample_out)
        return 0
    targets = DEFAULT_TARGETS if args.targets is None else tuple(parse_parameters(args.targets))
    if args.defier_share > 0:
        raise ValidationError("Monte Carlo summaries are only defined for the clean design")
    summary = run_monte_carlo(dgp, args.reps, targets, args.estimator, threads, args.learner,
                              args.trim, args.folds)
    learner = str(parse_learner(args.learner)) if args.learner else ("cells" if args.dgp == "discrete" else "series:6")
    ratio = summary.efficiency_ratio()
    cover = summary.coverage()
    model = SimulationReportModel(
        manifest=_manifest(args, seed=seed),
        dgp={"x_kind": dgp.x_kind, "n": dgp.n, "seed": dgp.seed, "success_z2": dgp.success_z2},
        reps=args.reps, estimator=args.estimator, learner=learner,
        rows=[McRowModel(parameter=r.parameter, value=r.value, mean_bias=_float_or_none(r.mean_bias),
                         median_bias=_float_or_none(r.median_bias), std=_float_or_none(r.std),
                         rmse=_float_or_none(r.rmse), successes=r.successes) for r in summary.rows()],
        efficiency_ratio={str(p): _float_or_none(v) for p, v in zip(targets, ratio)},
        coverage={str(p): _float_or_none(v) for p, v in zip(targets, cover)},
        failures=summary.failures,
    )
    _emit(args, model, summary.table())
    return 0


_COMMANDS = {}


def cmd_replay(args):
    text = Path(args.report).read_text() if Path(args.report).exists() else None
    if text is None:
        raise ValidationError(f"report {args.report} not found")
    try:
        original = load_report(text)
    except ValueError as exc:
        raise ValidationError(f"{args.report} is not a valid report: {exc}") from None
    m = original.manifest
    values = dict(m.flags)
    values.update(command=m.command, out=args.out, table=args.table, influence=None,
                  threads=None, stamp=False, sample_out=None)
    if args.threads is not None and m.command == "simulate":
        values["threads"] = args.threads
    replay_args = argparse.Namespace(**values)
    code = _COMMANDS[m.command](replay_args)
    if args.check:
        if not args.out:
            raise ValidationError("--check needs --out")
        same = Path(args.out).read_bytes() == text.encode()
        sys.stderr.write("replay identical\n" if same else "replay differs from the original report\n")
        return code if same else 1
    return code


_COMMANDS.update({
    "estimate": cmd_estimate,
    "dml": cmd_dml,
    "gmm": cmd_gmm,
    "test-implications": cmd_test,
    "simulate": cmd_simulate,
    "replay": cmd_replay,
})


# -- parser --------------------------------------------------------------------

def _common_io(p):
    p.add_argument("--out", help="write the JSON report here (default: stdout)")
    p.add_argument("--table", help="write the plain-text table here (default: stdout when --out is set)")
    p.add_argument("--stamp", action="store_true", help="record a timestamp in the manifest")


def _data_args(p):
    p.add_argument("--config", required=True, help="preset name (main_example, binary_late) or config JSON path")
    p.add_argument("--data", required=True, help="dataset CSV with header y,t,z,x1,...,xd")
    p.add_argument("--trim", type=float, default=DEFAULT_TRIM, help="propensity trim floor (default 0.01)")


def build_parser():
    parser = argparse.ArgumentParser(prog="gliv", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("estimate", help="plug-in estimates with efficient standard errors")
    _data_args(p)
    p.add_argument("--params", help="comma list such as beta:t1:1,gamma:t3:t3:1 (default: full family)")
    p.add_argument("--learner", default="cells", help="cells or series:<degree>")
    p.add_argument("--switchers", action="store_true", help="add the pooled switcher mean for each treatment")
    p.add_argument("--influence", help="write per-observation influence values to this CSV")
    _common_io(p)

    p = sub.add_parser("dml", help="cross-fitted estimates")
    _data_args(p)
    p.add_argument("--params", help="comma list of parameters (default: full family)")
    p.add_argument("--folds", type=int, default=5, help="number of folds L (default 5)")
    p.add_argument("--seed", type=int, help="fold assignment seed (default GLIV_SEED or 0)")
    p.add_argument("--learner", default="cells", help="cells or series:<degree>")
    _common_io(p)

    p = sub.add_parser("gmm", help="two-step GMM on pseudo-outcome moments")
    _data_args(p)
    p.add_argument("--spec", required=True, help="moment specification JSON")
    p.add_argument("--learner", default="cells", help="cells or series:<degree>")
    p.add_argument("--epsilon", type=float, help="difference step for the Jacobian (default n^-1/4)")
    _common_io(p)

    p = sub.add_parser("test-implications", help="plug-in checks of the observable implications")
    _data_args(p)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--bins", type=int, default=10, help="number of equal-probability outcome bins")
    g.add_argument("--breakpoints", help="comma separated interior breakpoints a,b,c")
    p.add_argument("--tolerance", default="auto", help="'auto' (3 plug-in SEs) or a number")
    _common_io(p)

    p = sub.add_parser("simulate", help="Monte Carlo study of the simulation designs")
    p.add_argument("--dgp", choices=["continuous", "discrete"], default="discrete")
    p.add_argument("--n", type=int, default=3000)
    p.add_argument("--reps", type=int, default=1000)
    p.add_argument("--seed", type=int, help="master seed (default GLIV_SEED or 0)")
    p.add_argument("--targets", help="comma list of parameters (default beta:t1:1,beta:t2:1,beta:t3:1)")
    p.add_argument("--estimator", choices=["cep", "dml"], default="cep")
    p.add_argument("--learner", help="cells or series:<degree> (default depends on the design)")
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--trim", type=float, default=DEFAULT_TRIM)
    p.add_argument("--threads", type=int, help="worker processes (default GLIV_THREADS or 1)")
    p.add_argument("--success-z1", action="store_true", help="map the Bernoulli success to the first instrument")
    p.add_argument("--defier-share", type=float, default=0.0,
                   help="share of defiers; only with --sample-out")
    p.add_argument("--sample-out", help="write replication 0 as CSV instead of running the study")
    _common_io(p)

    p = sub.add_parser("replay", help="rerun the command recorded in a report manifest")
    p.add_argument("report", help="report JSON produced by any command")
    p.add_argument("--out", help="where to write the regenerated report")
    p.add_argument("--table", help="where to write the regenerated table")
    p.add_argument("--threads", type=int, help="worker processes for simulate replays")
    p.add_argument("--check", action="store_true", help="exit 1 unless the output matches byte for byte")
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except GlivError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return exc.exit_code
    except Exception as exc:  # noqa: BLE001 - last-resort exit code contract
        sys.stderr.write(f"unexpected error: {type(exc).__name__}: {exc}\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
