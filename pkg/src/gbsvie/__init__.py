"""Numerical solver for backward stochastic Volterra integral equations driven by G-Brownian motion."""
import os as _os

# honour GBSVIE_THREADS for BLAS/OpenMP pools before numpy loads them
if "GBSVIE_THREADS" in _os.environ:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _os.environ["GBSVIE_THREADS"])

__version__ = "0.1.0"

from .bsvie import NonContraction, picard_sweep, solve_bsvie, solve_bsvie_no_y  # noqa: E402
from .engine import SolverError, g_expectation, g_function, solve_gbsde  # noqa: E402
from .expr import Expression, ExpressionError, parse_expression  # noqa: E402
from .model import (  # noqa: E402
    CFLError,
    GeneratorSpec,
    PicardConfig,
    ProblemSpec,
    SpaceGrid,
    TerminalFamily,
    TimeGrid,
    ValidationError,
    VolatilityBand,
    VolControl,
    validate_problem,
)
from .paths import mc_lower_bound, reconstruct_k, simulate_paths  # noqa: E402
from .verify import AuditError, apriori_diagnostics, compare_solutions, continuity_report  # noqa: E402
