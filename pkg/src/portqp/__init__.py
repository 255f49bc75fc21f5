"""Regularized portfolio optimization through a built-in ADMM QP solver."""
import os as _os

# The thread cap must be in place before numpy/numba load their pools.
_threads = _os.environ.get("PORTQP_NUM_THREADS")
if _threads:
    for _k in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMBA_NUM_THREADS"):
        _os.environ.setdefault(_k, _threads)

from .errors import PortQPError  # noqa: E402
from .qp import DEFAULT, HIGH, QPProblem, QPSettings, QPSolution, Status, solve_qp  # noqa: E402

__version__ = "0.1.0"
__all__ = ["PortQPError", "QPProblem", "QPSettings", "QPSolution", "Status", "solve_qp",
           "DEFAULT", "HIGH", "__version__"]
