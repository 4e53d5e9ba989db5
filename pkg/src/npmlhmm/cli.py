"""Command line: simulate | fit | identify | gof | reproduce."""
from __future__ import annotations

import argparse
import itertools
import logging
import sys
import time
from dataclasses import replace

import numpy as np

from . import io
from .core import FiniteMixtureDensity, HmmModel, ValidationError, simulate, validate_model
from .estimation import FitConfig, FitFailure, em_fit, npmle_fit
from .gof import BootstrapError, default_jobs, run_gof
from .identification import (
    GridSearchError,
    RecoveryError,
    build_threeway,
    find_full_rank_grid,
    joint_block_cdf,
    primitivity_exponent_check,
    rank_deficient_counterexample,
    recovery_error,
    required_window,
    spectral_recover,
    verify_kruskal_condition,
)
from .likelihood import GuardError
from .reproduce import reproduce_tables
from .scenarios import SCENARIOS, get_scenario

log = logging.getLogger("npmlhmm")

EXIT_OK, EXIT_VALIDATION, EXIT_FIT, EXIT_GUARD = 0, 2, 3, 4
MODES = {"gauss": 1, "two-comp": 2, "nonpar": None}


def _config(args):
    if getattr(args, "config", None):
        config, run = io.read_config(args.config)
    else:
        config, run = FitConfig(), {}
    if getattr(args, "seed", None) is not None:
        config = replace(config, seed=args.seed)
    return config, run


def _pick(cli_value, run: dict, key: str, default):
    if cli_value is not None:
        return cli_value
    return run.get(key, default)


def cmd_simulate(args) -> int:
    if args.model:
        model, _ = io.load_model(args.model)
        n = args.n or 1000
    else:
        spec = get_scenario(args.scenario or "scenario-a")
        model, n = spec.model, args.n or spec.n
    series = simulate(model, n, args.seed if args.seed is not None else 0)
    out = args.out or "series.csv"
    io.write_series_csv(series, out)
    print(f"wrote {series.n} observations to {out}")
    return EXIT_OK


def cmd_fit(args) -> int:
    config, run = _config(args)
    series = io.read_series_csv(args.data)
    K = _pick(args.K, run, "K", 3)
    mode = args.mode or "nonpar"
    if mode not in MODES:
        raise ValidationError(f"--mode must be one of {sorted(MODES)}")
    t0 = time.perf_counter()
    fit = npmle_fit(series, K, config) if mode == "nonpar" else em_fit(series, K, MODES[mode], config)
    elapsed = time.perf_counter() - t0
    out = args.out or "model.json"
    io.save_model(out, fit.model, fit, config, mode=mode)
    print(f"mode {mode}, K={K}, n={series.n}")
    print(f"log-likelihood {fit.loglik:.6f}  ({fit.n_iter} EM iterations, converged={fit.converged}, {elapsed:.1f}s)")
    print(f"support sizes {list(fit.support_sizes)}; schedule {fit.m_schedule}")
    print("transition matrix:")
    print(np.array2string(fit.model.gamma, precision=4))
    for k, f in enumerate(fit.model.densities, 1):
        print(f"state {k}: mean {f.mean:.4f}, sd {f.sd:.4f}, {f.n_components} component(s)")
    print(f"wrote {out}")
    return EXIT_OK


def _parse_counterexample(items):
    opts = {"delta": 0.3, "beta": 0.6}
    for item in items:
        key, _, value = item.partition("=")
        if key not in opts or not value:
            raise ValidationError(f"--counterexample expects delta=.. beta=.., got {item!r}")
        opts[key] = float(value)
    return opts


def _identify_counterexample(opts) -> int:
    base = np.array([[0.7, 0.3], [0.4, 0.6]])
    dens = [FiniteMixtureDensity.gaussian(-2.0, 1.0), FiniteMixtureDensity.gaussian(0.0, 1.0),
            FiniteMixtureDensity.gaussian(2.5, 1.5)]
    A, B = rank_deficient_counterexample(base, opts["delta"], opts["beta"], dens)
    p = opts["beta"] / (1 + opts["beta"] - opts["delta"])
    print(f"rank-deficient counterexample: delta={opts['delta']}, beta={opts['beta']}, p={p:.6f}")
    print("transition matrix:")
    print(np.array2string(A.gamma, precision=6))
    print(validate_model(A).summary())
    pts = np.linspace(-3.0, 3.0, 5)
    for L in range(1, 5):
        diff = max(abs(joint_block_cdf(A, z) - joint_block_cdf(B, z)) for z in itertools.product(pts, repeat=L))
        print(f"joint CDF of (Y_1..Y_{L}) on a 5^{L} grid: max |difference| = {diff:.3g}")
    try:
        find_full_rank_grid(A)
        print("full-rank grid found (unexpected)")
    except GridSearchError as exc:
        print(f"grid search: {exc}")
    return EXIT_OK


def cmd_identify(args) -> int:
    if args.counterexample is not None:
        return _identify_counterexample(_parse_counterexample(args.counterexample))
    if args.model:
        model, _ = io.load_model(args.model)
        model = HmmModel.stationary_model(model.gamma, model.densities)
    else:
        model = get_scenario(args.scenario or "scenario-a").model
    K = model.K
    report = validate_model(model)
    print(report.summary())
    print(f"identifying window for an arbitrary initial law: T = {required_window(K)}")
    if report.ergodic:
        print(f"primitivity at t0 = {K * K - 2 * K + 2}: {primitivity_exponent_check(model.gamma)}")
    if not report.ok:
        print("assumptions fail; blind recovery skipped")
        return EXIT_OK
    grid = find_full_rank_grid(model)
    print(f"grid: T = {grid.T}, smallest singular values A_1 {grid.singular_values[0]:.4g}, "
          f"A_2 {grid.singular_values[1]:.4g}")
    print(verify_kruskal_condition(model, grid).summary())
    result = spectral_recover(build_threeway(model, grid, extended=True), K)
    g_err, f_err = recovery_error(model, result, grid)
    print(f"spectral round trip: max-abs error Gamma {g_err:.3g}, F-values {f_err:.3g}")
    return EXIT_OK


def cmd_gof(args) -> int:
    config, run = _config(args)
    series = io.read_series_csv(args.data)
    K = _pick(args.K, run, "K", 3)
    B = _pick(args.B, run, "B", 200)
    jobs = _pick(args.jobs, run, "jobs", default_jobs())
    alt = args.alt or "two-comp"
    t0 = time.perf_counter()
    report = run_gof(series, K, alt, B, config, seed=config.seed, jobs=jobs)
    elapsed = time.perf_counter() - t0
    out = args.out or "gof_report.json"
    io.save_json(out, report.to_dict())
    print(f"LRT statistic {report.statistic:.4f} against {alt} (B={B})")
    for lvl, cv in report.critical_values.items():
        print(f"  level {lvl:.2f}: critical value {cv:.4f} -> {report.decision[lvl]}")
    print(f"runtime {elapsed:.1f}s; wrote {out}")
    return EXIT_OK


def cmd_reproduce(args) -> int:
    config, run = _config(args)
    spec = get_scenario(args.scenario or "scenario-a")
    n = _pick(args.n, run, "n", spec.n)
    reps = _pick(args.reps, run, "reps", 50)
    jobs = _pick(args.jobs, run, "jobs", default_jobs())
    table = reproduce_tables(spec, n, reps, seed=config.seed, config=config, jobs=jobs)
    rel, tr = table.write_csv(args.out or "tables")
    print(f"{spec.name}: {reps} replications of n={n}; failures {table.n_failed}")
    print(f"wrote {rel} and {tr}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="npmlhmm", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, *flags):
        if "scenario" in flags:
            p.add_argument("--scenario", choices=sorted(SCENARIOS))
        if "n" in flags:
            p.add_argument("--n", type=int)
        if "seed" in flags:
            p.add_argument("--seed", type=int)
        if "reps" in flags:
            p.add_argument("--reps", type=int)
        if "mode" in flags:
            p.add_argument("--mode", choices=sorted(MODES))
        if "alt" in flags:
            p.add_argument("--alt", choices=["two-comp", "nonpar"])
        if "B" in flags:
            p.add_argument("--B", type=int)
        if "jobs" in flags:
            p.add_argument("--jobs", type=int)
        if "config" in flags:
            p.add_argument("--config")
        if "K" in flags:
            p.add_argument("--K", type=int)
        p.add_argument("--out")

    p = sub.add_parser("simulate", help="simulate a series to CSV")
    common(p, "scenario", "n", "seed")
    p.add_argument("--model", help="model file to simulate from instead of a scenario")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="fit a model to a CSV series")
    p.add_argument("data")
    common(p, "mode", "config", "seed", "K")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("identify", help="audit identifiability and run blind recovery")
    p.add_argument("model", nargs="?")
    common(p, "scenario")
    p.add_argument("--counterexample", nargs="*", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_identify)

    p = sub.add_parser("gof", help="bootstrap goodness-of-fit test of a Gaussian HMM")
    p.add_argument("data")
    common(p, "alt", "B", "seed", "jobs", "config", "K")
    p.set_defaults(func=cmd_gof)

    p = sub.add_parser("reproduce", help="relative-error and transition-error tables")
    common(p, "scenario", "n", "reps", "seed", "jobs", "config")
    p.set_defaults(func=cmd_reproduce)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ValidationError, FileNotFoundError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except GuardError as exc:
        print(f"refused: {exc}", file=sys.stderr)
        return EXIT_GUARD
    except (FitFailure, BootstrapError, GridSearchError, RecoveryError) as exc:
        print(f"fit failure: {exc}", file=sys.stderr)
        return EXIT_FIT


if __name__ == "__main__":
    sys.exit(main())
