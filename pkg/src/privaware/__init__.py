"""Privacy-aware client selection for DP-FedAvg with heterogeneous privacy budgets.

Modules:

- ``accounting``: per-client noise coefficients V_k and sigma_k^2.
- ``selection``: the selection problem, its solver, KKT certificate and schedules.
- ``bounds``: convergence-bound evaluators and the T-profile of the non-convex bound.
- ``models`` / ``federation``: exact per-example gradients and the DP-FedAvg loop.
- ``data``: client sizes, non-IID partitions, synthetic blobs, IDX files, budgets.
- ``config`` / ``manifest`` / ``experiment`` / ``cli``: the experiment harness.
"""

from .accounting import ClientProfile, PrivacyBudget, compute_noise_coefficient, per_client_sigma_squared
from .errors import ConsistencyError, ConvergenceError, DomainError, ParseError
from .selection import SelectionProbabilities, SelectionProblem, kkt_check, solve

__version__ = "0.1.0"

__all__ = [
    "ClientProfile",
    "PrivacyBudget",
    "compute_noise_coefficient",
    "per_client_sigma_squared",
    "SelectionProbabilities",
    "SelectionProblem",
    "solve",
    "kkt_check",
    "DomainError",
    "ParseError",
    "ConvergenceError",
    "ConsistencyError",
]
