"""Command-line entry point: ``mcls run|analyze|oracle|reference``."""
from __future__ import annotations

import argparse
import json
import math
import os
import sys
from typing import Optional, Sequence

import numpy as np

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2
SIGMA_PAIRS = 200_000


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mcls", description="Monte Carlo least-squares experiments.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run = sub.add_parser("run", help="run an experiment config, write CSV and JSON")
    run.add_argument("config")
    run.add_argument("--out", default=".", help="output directory")
    run.add_argument("--runs", type=int)
    run.add_argument("--seed", type=int)
    run.add_argument("--workers", type=int, help="worker processes (default $MCLS_WORKERS)")

    an = sub.add_parser("analyze", help="fit slopes/levels in a results JSON")
    an.add_argument("results")
    an.add_argument("--window", type=float, help="fit window fraction (default last decade)")

    orc = sub.add_parser("oracle", help="theory oracles")
    osub = orc.add_subparsers(dest="oracle", required=True, parser_class=_Parser)
    rec = osub.add_parser("recurrence", help="hybrid covariance recurrence vs closed form")
    rec.add_argument("--eta", type=float, required=True)
    rec.add_argument("--p", type=float, required=True)
    rec.add_argument("--averaged", action="store_true")
    rec.add_argument("--alpha", type=float, default=0.75)
    rec.add_argument("--steps", type=int)

    ref = sub.add_parser("reference", help="recompute a reference solution")
    ref.add_argument("problem", choices=["problem1"])
    ref.add_argument("--budget", type=int, default=100_000, help="iterations per instance")
    ref.add_argument("--seed", type=int, default=0)
    return p


def _cmd_run(args) -> int:
    from .harness import ExperimentConfig, export_csv, export_json, run_experiment

    cfg = ExperimentConfig.load(args.config)
    d = cfg.to_dict()
    if args.runs is not None:
        d["runs"] = args.runs
    if args.seed is not None:
        d["master_seed"] = args.seed
    cfg = ExperimentConfig.from_dict(d)
    cfg.build_problem()
    result = run_experiment(cfg, workers=args.workers)
    os.makedirs(args.out, exist_ok=True)
    stem = os.path.splitext(os.path.basename(args.config))[0]
    csv_path = os.path.join(args.out, f"{stem}.csv")
    json_path = os.path.join(args.out, f"{stem}.json")
    export_csv(result, csv_path)
    export_json(result, json_path)
    print(f"wrote {csv_path}")
    print(f"wrote {json_path}")
    return EXIT_OK


def _asymptotes(doc: dict) -> dict:
    """Theoretical levels per method label for problems with a reference."""
    from .analysis import N_INFINITY, AsymptoteSpec, theoretical_asymptote
    from .estimators import estimate_sigma_decomposition
    from .problems import make_problem
    from .rng import RunRng

    prob = make_problem(doc["config"]["problem"])
    ref = prob.reference
    if ref is None:
        return {}
    sig = estimate_sigma_decomposition(prob, ref.x_star, SIGMA_PAIRS, RunRng.from_seed(0))
    out = {}
    for label, m in doc["methods"].items():
        cfg = m["config"]
        n = N_INFINITY
        if cfg["method"] in ("sgd", "asgd") and "samples" in cfg:
            n = max(2, round(cfg["samples"]["n1"]))
        try:
            out[label] = theoretical_asymptote(
                AsymptoteSpec(ref.s_matrix, sig.sigma_a2, sig.sigma_b2, n))
        except np.linalg.LinAlgError:
            out[label] = math.nan
    return out


def _cmd_analyze(args) -> int:
    from .analysis import decade_window, fit_trace
    from .harness import aggregate_from_json, load_results

    try:
        doc = load_results(args.results)
        labels = list(doc["methods"])
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ValueError(f"{args.results} is not a results file: {exc}") from None
    theory = _asymptotes(doc)
    print(f"{'method':<22} {'slope':>9} {'level':>12} {'level_se':>11} {'theory':>12}")
    for label in labels:
        agg = aggregate_from_json(doc, label)
        w = args.window if args.window is not None else decade_window(agg.costs)
        fit = fit_trace(agg, w)
        th = theory.get(label, math.nan)
        print(f"{label:<22} {fit.slope:>9.4f} {fit.level:>12.6g} {fit.level_stderr:>11.3g} "
              f"{th:>12.6g}")
    return EXIT_OK


def _cmd_oracle(args) -> int:
    from .analysis import (RecurrenceSpec, hybrid_constant_closed_form,
                           hybrid_recurrence_limit)

    steps = args.steps or (10_000_000 if args.averaged else 100_000)
    spec = RecurrenceSpec(args.eta, args.p, args.averaged, args.alpha, steps)
    if args.averaged:
        print("expected limit: 1.0")
    else:
        print(f"closed form: {hybrid_constant_closed_form(args.eta, args.p)!r}")
    print(f"simulated limit ({steps} steps): {hybrid_recurrence_limit(spec)!r}")
    return EXIT_OK


def _cmd_reference(args) -> int:
    from .problems import P1_PUBLISHED_X_STAR, problem1_reference_recompute
    from .rng import RunRng

    x, cov = problem1_reference_recompute(args.budget, RunRng.from_seed(args.seed))
    print(f"x* estimate: {x.tolist()}")
    print(f"covariance of mean: {cov.tolist()}")
    print(f"published point: {P1_PUBLISHED_X_STAR.tolist()}")
    return EXIT_OK


_COMMANDS = {"run": _cmd_run, "analyze": _cmd_analyze, "oracle": _cmd_oracle,
             "reference": _cmd_reference}


def cli_main(argv: Optional[Sequence[str]] = None) -> int:
    from .analysis import RecurrenceDivergence, StabilityError
    from .harness import ExperimentError
    from .optimizers import ConfigError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_CONFIG
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_CONFIG
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, StabilityError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG if args.command != "analyze" else EXIT_RUNTIME
    except (ExperimentError, RecurrenceDivergence, OSError, ValueError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main():
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
