"""Stochastic optimization for Monte Carlo least-squares problems."""
from .analysis import (
    N_INFINITY, AsymptoteSpec, RecurrenceDivergence, RecurrenceSpec, StabilityError, TraceFit,
    fit_trace, hybrid_constant_approx, hybrid_constant_closed_form, hybrid_recurrence_simulate,
    theoretical_asymptote,
)
from .core import BoxConstraints, McLsProblem, ReferenceSolution, SamplePair, project
from .estimators import (
    ForgetSchedule, HybridState, SigmaDecomposition, estimate_sigma_decomposition,
    grad_two_sample, grad_usample, hybrid_direct, hybrid_update,
)
from .harness import (
    AggregateTrace, ExperimentConfig, ExperimentError, ExperimentResult, Trace,
    export_csv, export_json, run_experiment,
)
from .optimizers import (
    ConfigError, Optimizer, OptimizerConfig, OptimizerState, SampleSchedule, StepSchedule,
    make_optimizer,
)
from .problems import (
    LinearGaussianProblem, Problem1, Problem2, make_problem, problem1_reference_recompute,
)
from .rng import RunRng, rng_for_run

__version__ = "0.1.0"
