"""Reproducible, parallel black-box tuning of application configurations."""

__version__ = "0.1.0"

from .problem import (  # noqa: E402
    AffineExpression,
    Constraint,
    ObjectiveSpec,
    ProblemSpec,
    SearchSpace,
    Variable,
    check_constraints,
    parse_problem,
    serialize_problem,
    validate_configuration,
)
from .sampling import SamplerSpec, halton, latin_hypercube, random_candidates, sample  # noqa: E402
from .surrogate import ExtraTreesSurrogate  # noqa: E402
from .search import (  # noqa: E402
    BayesianOptimizer,
    DifferentialEvolution,
    SearchSpec,
    SimulatedAnnealing,
    make_optimizer,
)
from .plantnet_sim import MetricsReport, PoolConfig, SimParams, calibrate, simulate  # noqa: E402
from .sensitivity import OatPlan, analyze, expand  # noqa: E402
from .runner import ExecutorSpec, Trial, load_run_document, run_cycle  # noqa: E402
from .archive import load_manifest, replay, write_manifest  # noqa: E402

__all__ = [
    "__version__",
    "AffineExpression", "Constraint", "ObjectiveSpec", "ProblemSpec", "SearchSpace", "Variable",
    "check_constraints", "parse_problem", "serialize_problem", "validate_configuration",
    "SamplerSpec", "halton", "latin_hypercube", "random_candidates", "sample",
    "ExtraTreesSurrogate",
    "BayesianOptimizer", "DifferentialEvolution", "SearchSpec", "SimulatedAnnealing",
    "make_optimizer",
    "MetricsReport", "PoolConfig", "SimParams", "calibrate", "simulate",
    "OatPlan", "analyze", "expand",
    "ExecutorSpec", "Trial", "load_run_document", "run_cycle",
    "load_manifest", "replay", "write_manifest",
]
