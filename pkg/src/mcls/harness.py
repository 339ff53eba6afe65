"""Multi-run experiments: seeding, parallel execution, aggregation, export."""
from __future__ import annotations

import csv
import io
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .analysis import TraceFit, decade_window, fit_trace
from .core import McLsProblem
from .optimizers import ConfigError, Optimizer, OptimizerConfig, simulate
from .problems import make_problem
from .rng import rng_for_run

CSV_COLUMNS = ("method", "run_count", "checkpoint_cost", "mse_mean", "mse_stddev_of_mean")
EVALUATED_POINT = "projected reported iterate (running average for averaged methods)"
RUNS_PER_TASK = 25


class ExperimentError(RuntimeError):
    """One or more runs aborted; ``failures`` lists (method, run_index, iteration)."""

    def __init__(self, failures):
        self.failures = list(failures)
        shown = ", ".join(f"({m}, run {r}, iteration {k})" for m, r, k in self.failures[:10])
        more = "" if len(self.failures) <= 10 else f" and {len(self.failures) - 10} more"
        super().__init__(f"non-finite values in {len(self.failures)} run(s): {shown}{more}")


def checkpoint_costs(budget: int, ratio: float = 1.2) -> np.ndarray:
    """Distinct thresholds ``ceil(ratio^j)`` up to ``budget``."""
    if not ratio > 1.0:
        raise ValueError("checkpoint ratio must exceed 1")
    out = []
    j = 0
    while True:
        c = math.ceil(ratio**j)
        if c > budget:
            break
        if not out or c > out[-1]:
            out.append(c)
        j += 1
    return np.array(out, dtype=np.int64)


@dataclass(frozen=True)
class ExperimentConfig:
    problem: dict
    methods: tuple
    runs: int = 1000
    budget: int = 1_000_000
    master_seed: int = 0
    checkpoint_ratio: float = 1.2

    def __post_init__(self):
        if not isinstance(self.problem, dict) or "name" not in self.problem:
            raise ConfigError("problem", "must be an object with a 'name'")
        methods = tuple(m if isinstance(m, OptimizerConfig) else OptimizerConfig.from_dict(m)
                        for m in self.methods)
        if not methods:
            raise ConfigError("methods", "at least one method is required")
        labels = [m.label for m in methods]
        if len(set(labels)) != len(labels):
            raise ConfigError("methods", f"duplicate method labels in {labels}")
        object.__setattr__(self, "methods", methods)
        if int(self.runs) != self.runs or self.runs < 2:
            raise ConfigError("runs", "must be an integer >= 2")
        if int(self.budget) != self.budget or self.budget < 100:
            raise ConfigError("budget", "must be an integer >= 100")
        if int(self.master_seed) != self.master_seed or not 0 <= self.master_seed < 2**64:
            raise ConfigError("master_seed", "must be a 64-bit unsigned integer")
        if not self.checkpoint_ratio > 1.0:
            raise ConfigError("checkpoint_ratio", "must be > 1")
        object.__setattr__(self, "runs", int(self.runs))
        object.__setattr__(self, "budget", int(self.budget))
        object.__setattr__(self, "master_seed", int(self.master_seed))

    def build_problem(self) -> McLsProblem:
        try:
            prob = make_problem(self.problem)
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError("problem", str(exc)) from None
        if prob.reference is None:
            raise ConfigError("problem", "experiments need a problem with a reference solution")
        return prob

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("config", "must be a JSON object")
        known = {"problem", "methods", "runs", "budget", "master_seed", "checkpoint_ratio"}
        extra = sorted(set(d) - known)
        if extra:
            raise ConfigError(extra[0], "unknown field")
        for key in ("problem", "methods"):
            if key not in d:
                raise ConfigError(key, "missing")
        if not isinstance(d["methods"], list):
            raise ConfigError("methods", "must be a list")
        return cls(d["problem"], tuple(d["methods"]), d.get("runs", 1000),
                   d.get("budget", 1_000_000), d.get("master_seed", 0),
                   d.get("checkpoint_ratio", 1.2))

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError("config", f"invalid JSON in {path}: {exc}") from None
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return {
            "problem": dict(self.problem),
            "methods": [m.to_dict() for m in self.methods],
            "runs": self.runs,
            "budget": self.budget,
            "master_seed": self.master_seed,
            "checkpoint_ratio": self.checkpoint_ratio,
        }


@dataclass(frozen=True)
class Trace:
    """Checkpointed squared errors of one run."""

    costs: np.ndarray
    sq_errors: np.ndarray

    @property
    def checkpoints(self):
        return list(zip(self.costs.tolist(), self.sq_errors.tolist()))


@dataclass(frozen=True)
class AggregateTrace:
    costs: np.ndarray
    mse_mean: np.ndarray
    mse_stddev_of_mean: np.ndarray
    run_count: int

    @property
    def error_band(self) -> np.ndarray:
        """Three standard deviations of the mean."""
        return 3.0 * self.mse_stddev_of_mean

    @classmethod
    def from_runs(cls, costs, sq_errors: np.ndarray) -> "AggregateTrace":
        runs = sq_errors.shape[0]
        mean = sq_errors.mean(axis=0)
        sem = sq_errors.std(axis=0, ddof=1) / math.sqrt(runs)
        return cls(np.asarray(costs), mean, sem, runs)


@dataclass
class MethodResult:
    config: OptimizerConfig
    aggregate: AggregateTrace
    sq_errors: Optional[np.ndarray] = None
    iterations: Optional[np.ndarray] = None
    guard_off_at: Optional[np.ndarray] = None

    def fit(self, window: Optional[float] = None) -> TraceFit:
        w = decade_window(self.aggregate.costs) if window is None else window
        return fit_trace(self.aggregate, w)

    def trace(self, run_index: int) -> Trace:
        if self.sq_errors is None:
            raise ValueError("per-run errors were not kept")
        return Trace(self.aggregate.costs, self.sq_errors[run_index])


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    methods: dict = field(default_factory=dict)
    problem_info: dict = field(default_factory=dict)

    def __getitem__(self, label) -> MethodResult:
        return self.methods[label]

    def __iter__(self):
        return iter(self.methods)

    def items(self):
        return self.methods.items()


# --------------------------------------------------------------- execution


def default_workers() -> int:
    env = os.environ.get("MCLS_WORKERS")
    if env:
        try:
            w = int(env)
        except ValueError:
            raise ConfigError("MCLS_WORKERS", f"not an integer: {env!r}") from None
        if w < 1:
            raise ConfigError("MCLS_WORKERS", "must be >= 1")
        return w
    return os.cpu_count() or 1


_WORKER_CACHE: dict = {}


def _prepare(problem_spec: dict, method_dict: dict):
    key = (json.dumps(problem_spec, sort_keys=True), json.dumps(method_dict, sort_keys=True))
    hit = _WORKER_CACHE.get(key)
    if hit is None:
        prob = make_problem(problem_spec)
        opt = Optimizer(OptimizerConfig.from_dict(method_dict), prob)
        hit = _WORKER_CACHE[key] = (prob, opt)
    return hit


def run_chunk(problem_spec: dict, method_dict: dict, master_seed: int, budget: int,
              thresholds: np.ndarray, run_start: int, run_stop: int):
    """Execute runs ``[run_start, run_stop)`` of one method.

    Returns ``(run_start, sq_errors, iterations, guard_off, failures)``.
    """
    prob, opt = _prepare(problem_spec, method_dict)
    thr = thresholds.astype(np.float64)
    count = run_stop - run_start
    errs = np.empty((count, thr.shape[0]))
    iters = np.zeros(count, dtype=np.int64)
    guard = np.zeros(count, dtype=np.int64)
    failures = []
    x_star = prob.reference.x_star
    for i, run in enumerate(range(run_start, run_stop)):
        rng = rng_for_run(master_seed, run)
        # Drawn before any method consumes randomness: shared across methods.
        x0 = np.ascontiguousarray(opt.init_state(prob.initial_point(rng)).x)
        status, k, g_off, out = simulate(
            prob.kernel, prob.params, opt.code, opt.form, opt.fpar, opt.dmat,
            prob.box.lower, prob.box.upper, x0, x_star, rng, float(budget), thr, prob.dim_m)
        errs[i] = out
        iters[i] = k
        guard[i] = g_off
        if status != 0:
            failures.append((opt.config.label, run, k))
    return run_start, errs, iters, guard, failures


def run_experiment(config: ExperimentConfig, workers: Optional[int] = None,
                   keep_runs: bool = True) -> ExperimentResult:
    """Run every method for every run index and aggregate the traces.

    Tasks are chunks of run indices for one method; results are placed by
    run index before aggregation, so the output does not depend on the
    number of workers or on completion order.
    """
    prob = config.build_problem()
    workers = default_workers() if workers is None else int(workers)
    if workers < 1:
        raise ConfigError("workers", "must be >= 1")
    thresholds = checkpoint_costs(config.budget, config.checkpoint_ratio)
    method_dicts = [m.to_dict() for m in config.methods]
    tasks = []
    for mi, md in enumerate(method_dicts):
        for start in range(0, config.runs, RUNS_PER_TASK):
            stop = min(start + RUNS_PER_TASK, config.runs)
            tasks.append((mi, (config.problem, md, config.master_seed, config.budget,
                               thresholds, start, stop)))
    n_m = len(method_dicts)
    errs = [np.empty((config.runs, thresholds.shape[0])) for _ in range(n_m)]
    iters = [np.zeros(config.runs, dtype=np.int64) for _ in range(n_m)]
    guard = [np.zeros(config.runs, dtype=np.int64) for _ in range(n_m)]
    failures = []

    def place(mi, res):
        start, e, it, g, fails = res
        errs[mi][start:start + e.shape[0]] = e
        iters[mi][start:start + e.shape[0]] = it
        guard[mi][start:start + e.shape[0]] = g
        failures.extend(fails)

    if workers == 1:
        for mi, args in tasks:
            place(mi, run_chunk(*args))
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [(mi, pool.submit(run_chunk, *args)) for mi, args in tasks]
            for mi, fut in futures:
                place(mi, fut.result())
    if failures:
        failures.sort(key=lambda f: (f[0], f[1]))
        raise ExperimentError(failures)
    result = ExperimentResult(config, problem_info=prob.describe())
    for mi, cfg in enumerate(config.methods):
        agg = AggregateTrace.from_runs(thresholds, errs[mi])
        result.methods[cfg.label] = MethodResult(
            cfg, agg, errs[mi] if keep_runs else None, iters[mi],
            guard[mi] if cfg.method in ("sgn", "asgn") else None)
    return result


# ------------------------------------------------------------------ export


def _fmt(v) -> str:
    return repr(float(v))


def csv_text(results: ExperimentResult) -> str:
    if not results.methods:
        raise ValueError("no results to export")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for label, res in results.items():
        agg = res.aggregate
        for c, mu, se in zip(agg.costs, agg.mse_mean, agg.mse_stddev_of_mean):
            w.writerow([label, agg.run_count, int(c), _fmt(mu), _fmt(se)])
    return buf.getvalue()


def _json_float(v):
    v = float(v)
    return v if math.isfinite(v) else None


def json_document(results: ExperimentResult, window: Optional[float] = None) -> dict:
    if not results.methods:
        raise ValueError("no results to export")
    methods = {}
    for label, res in results.items():
        agg = res.aggregate
        entry = {
            "config": res.config.to_dict(),
            "run_count": agg.run_count,
            "checkpoint_cost": [int(c) for c in agg.costs],
            "mse_mean": [float(v) for v in agg.mse_mean],
            "mse_stddev_of_mean": [float(v) for v in agg.mse_stddev_of_mean],
        }
        try:
            w = decade_window(agg.costs) if window is None else window
            fit = fit_trace(agg, w)
            entry["fit"] = {"window": w, "slope": fit.slope, "level": fit.level,
                            "level_stderr": _json_float(fit.level_stderr), "points": fit.points}
        except ValueError as exc:
            entry["fit"] = {"error": str(exc)}
        if res.guard_off_at is not None:
            entry["guard_off_at"] = [int(v) for v in res.guard_off_at]
        methods[label] = entry
    return {
        "config": results.config.to_dict(),
        "problem": results.problem_info,
        "evaluated_point": EVALUATED_POINT,
        "methods": methods,
    }


def _write(path, text: str):
    try:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    except OSError as exc:
        raise OSError(exc.errno, f"cannot write {path}: {exc.strerror}") from exc


def export_csv(results: ExperimentResult, path) -> None:
    _write(path, csv_text(results))


def export_json(results: ExperimentResult, path, window: Optional[float] = None) -> None:
    _write(path, json.dumps(json_document(results, window), indent=1) + "\n")


def load_results(path) -> dict:
    with open(path) as fh:
        return json.load(fh)


def aggregate_from_json(doc: dict, label: str) -> AggregateTrace:
    m = doc["methods"][label]
    return AggregateTrace(np.array(m["checkpoint_cost"]), np.array(m["mse_mean"]),
                          np.array(m["mse_stddev_of_mean"]), int(m["run_count"]))


def stack_traces(traces: Sequence[Trace]) -> AggregateTrace:
    """Aggregate already-collected per-run traces (all on the same checkpoints)."""
    costs = traces[0].costs
    for t in traces:
        if not np.array_equal(t.costs, costs):
            raise ValueError("traces use different checkpoints")
    return AggregateTrace.from_runs(costs, np.stack([t.sq_errors for t in traces]))
