"""Gaussian-mechanism noise calibration for heterogeneous client budgets.

Each client k holds a budget (epsilon_k, delta_k), a dataset of size |M_k| and
samples local mini-batches with ratio r_k. The per-dimension noise variance it
must add during training is

    sigma_k^2 = V_k * T_k * T_l * C^2

where ``V_k`` (the noise coefficient) inverts privacy amplification by
subsampling and then applies the strong-composition Gaussian bound.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .errors import DomainError

__all__ = [
    "PrivacyBudget",
    "ClientProfile",
    "gaussian_mechanism_variance",
    "strong_composition_variance",
    "amplified_epsilon",
    "compute_noise_coefficient",
    "per_client_sigma_squared",
]


@dataclass(frozen=True)
class PrivacyBudget:
    epsilon: float
    delta: float

    def __post_init__(self):
        if not (math.isfinite(self.epsilon) and self.epsilon > 0):
            raise DomainError(f"epsilon must be > 0, got {self.epsilon!r}")
        if not (0 < self.delta <= 1):
            raise DomainError(f"delta must be in (0, 1], got {self.delta!r}")


@dataclass(frozen=True)
class ClientProfile:
    """One client's size, budget and sampling ratio.

    ``noise_coefficient`` is derived on construction and cannot be passed in.
    """

    id: int
    dataset_size: int
    budget: PrivacyBudget
    subsampling_ratio: float
    noise_coefficient: float = field(init=False)

    def __post_init__(self):
        if int(self.dataset_size) != self.dataset_size or self.dataset_size < 1:
            raise DomainError(f"dataset_size must be a positive integer, got {self.dataset_size!r}")
        _check_ratio(self.subsampling_ratio)
        v = compute_noise_coefficient(self.dataset_size, self.budget, self.subsampling_ratio)
        object.__setattr__(self, "noise_coefficient", v)


def _check_ratio(ratio: float) -> None:
    if not (0 < ratio <= 1):
        raise DomainError(f"subsampling ratio must be in (0, 1], got {ratio!r}")


def gaussian_mechanism_variance(sensitivity: float, budget: PrivacyBudget) -> float:
    """Classic single-shot Gaussian mechanism: 2 S^2 log(1.25/delta) / eps^2."""
    if not sensitivity > 0:
        raise DomainError(f"sensitivity must be > 0, got {sensitivity!r}")
    return 2.0 * sensitivity**2 * math.log(1.25 / budget.delta) / budget.epsilon**2


def _composition_variance(sensitivity: float, epsilon: float, delta: float, iterations: int) -> float:
    # No range check on delta: callers pass delta/r, which may exceed 1.
    return 8.0 * iterations * sensitivity**2 * math.log(math.e + epsilon / delta) / epsilon**2


def strong_composition_variance(sensitivity: float, budget: PrivacyBudget, iterations: int) -> float:
    """Variance making ``iterations`` Gaussian releases jointly (eps, delta)-DP.

    Returns 8 T S^2 log(e + eps/delta) / eps^2, which is linear in T.
    """
    if not sensitivity > 0:
        raise DomainError(f"sensitivity must be > 0, got {sensitivity!r}")
    if int(iterations) != iterations or iterations < 1:
        raise DomainError(f"iterations must be a positive integer, got {iterations!r}")
    return _composition_variance(sensitivity, budget.epsilon, budget.delta, int(iterations))


def amplified_epsilon(epsilon: float, ratio: float) -> float:
    """Budget a mechanism may spend so that its r-subsampled run is eps-DP.

    Computes log(1 + (e^eps - 1) / r) without cancellation for tiny eps and
    without overflow for large eps.
    """
    if not (math.isfinite(epsilon) and epsilon > 0):
        raise DomainError(f"epsilon must be > 0, got {epsilon!r}")
    _check_ratio(ratio)
    if epsilon <= 1.0:
        return math.log1p(math.expm1(epsilon) / ratio)
    # log((1/r)(1 + (r - 1) e^-eps)) + eps
    return epsilon - math.log(ratio) + math.log1p((ratio - 1.0) * math.exp(-epsilon))


def compute_noise_coefficient(dataset_size: int, budget: PrivacyBudget, subsampling_ratio: float) -> float:
    """Per-dimension variance factor V_k of one client.

    V_k = 8 log(e + r eps' / delta) / (|M|^2 r^2 eps'^2) with
    eps' = amplified_epsilon(eps, r). This is the composition variance at
    budget (eps', delta / r) for a batch-mean query of sensitivity 1/(r |M|).
    """
    if int(dataset_size) != dataset_size or dataset_size < 1:
        raise DomainError(f"dataset_size must be a positive integer, got {dataset_size!r}")
    r = subsampling_ratio
    eps_prime = amplified_epsilon(budget.epsilon, r)
    sensitivity = 1.0 / (dataset_size * r)
    return _composition_variance(sensitivity, eps_prime, budget.delta / r, 1)


def per_client_sigma_squared(profile: ClientProfile, selected_count: int, local_rounds: int, clip: float) -> float:
    """sigma_k^2 = V_k T_k T_l C^2; zero for a client that is never selected."""
    if not clip > 0:
        raise DomainError(f"clip must be > 0, got {clip!r}")
    if selected_count < 0:
        raise DomainError(f"selected_count must be >= 0, got {selected_count!r}")
    if local_rounds < 1:
        raise DomainError(f"local_rounds must be >= 1, got {local_rounds!r}")
    if selected_count == 0:
        return 0.0
    return profile.noise_coefficient * selected_count * local_rounds * clip**2
