"""Moving-horizon and full-information estimation with certified error bounds."""

from .errors import EstimationError
from .estimator import FULL, EstimationProblem, SolverSettings, build_cost, run_fie, run_mhe, solve_window
from .system_model import IossCertificate, make_system, shipped_certificate, simulate

__all__ = [
    "FULL",
    "EstimationError",
    "EstimationProblem",
    "IossCertificate",
    "SolverSettings",
    "build_cost",
    "make_system",
    "run_fie",
    "run_mhe",
    "shipped_certificate",
    "simulate",
    "solve_window",
]
