"""Lattice solver and property harness for quadratic BSDEs with jumps."""
from .errors import (
    BudgetError,
    ConfigurationError,
    ConvergenceError,
    IntensityStepError,
    MeasureChangeError,
    PicardDivergence,
    PreconditionError,
    QBSDEJError,
    StageError,
    StructuralError,
)
from .generators import (
    Generator,
    GeneratorParams,
    entropic,
    girsanov_reduce,
    linear,
    make_builtin,
    royer,
    shift_generator,
    zero,
)
from .lattice import (
    LatticeModel,
    MarkSpace,
    ProbabilityWeights,
    TimeGrid,
    build_lattice,
    doleans_exponential,
    project_representation,
)
from .norms import NormReport, compute_norms
from .solver import (
    PicardConfig,
    SolutionTriple,
    picard_map,
    picard_solve,
    residual,
    shift_g0,
    solve_exact,
    solve_general,
    split_terminal,
)

__version__ = "0.1.0"

__all__ = [
    "BudgetError",
    "ConfigurationError",
    "ConvergenceError",
    "Generator",
    "GeneratorParams",
    "IntensityStepError",
    "LatticeModel",
    "MarkSpace",
    "MeasureChangeError",
    "NormReport",
    "PicardConfig",
    "PicardDivergence",
    "PreconditionError",
    "ProbabilityWeights",
    "QBSDEJError",
    "SolutionTriple",
    "StageError",
    "StructuralError",
    "TimeGrid",
    "build_lattice",
    "compute_norms",
    "doleans_exponential",
    "entropic",
    "girsanov_reduce",
    "linear",
    "make_builtin",
    "picard_map",
    "picard_solve",
    "project_representation",
    "residual",
    "royer",
    "shift_g0",
    "shift_generator",
    "solve_exact",
    "solve_general",
    "split_terminal",
    "zero",
]
