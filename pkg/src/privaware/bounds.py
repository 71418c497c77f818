"""Closed-form error terms and convergence bounds for DP-FedAvg.

The strongly convex bound (``theorem1_bound``) assumes the decaying stepsize
beta / (gamma + t); the non-convex one (``theorem2_bound``) the constant
stepsize (B1 / C) / sqrt(T). ``corollary2_profile`` tracks the T-dependent
part of the non-convex bound, which first falls and then grows with T once
DP noise is present.

Constants (L, mu, B1, B2) are inputs, never estimated. For the quadratic
model L = mu = 1 and the optima are known; elsewhere the evaluators take
placeholder values and their output is indicative only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DomainError
from .selection import SelectionProbabilities

__all__ = [
    "BoundInputs",
    "ErrorTerms",
    "ClippingGap",
    "g_select_clip",
    "g_dp",
    "theorem1_bound",
    "theorem2_bound",
    "corollary2_f",
    "corollary2_derivative",
    "corollary2_profile",
    "empirical_clipping_gap",
]


@dataclass(frozen=True)
class BoundInputs:
    smoothness_L: float
    gradient_bound_B1: float
    clip_C: float
    model_dimension_D: int
    total_iterations_T: int
    strong_convexity_mu: float = 1.0
    dissimilarity_B2: float = 0.0
    stepsize_beta: float = 1.0
    stepsize_gamma: float = 1.0
    gamma_tradeoff_Gamma: float = 1.0
    initial_gap: float = 0.0
    initial_distance: float = 0.0
    clipping_gap_estimate: float = 0.0

    def __post_init__(self):
        for name in ("smoothness_L", "gradient_bound_B1", "clip_C", "strong_convexity_mu",
                     "stepsize_beta", "gamma_tradeoff_Gamma"):
            if not getattr(self, name) > 0:
                raise DomainError(f"{name} must be > 0")
        for name in ("dissimilarity_B2", "initial_gap", "initial_distance", "clipping_gap_estimate"):
            if not getattr(self, name) >= 0:
                raise DomainError(f"{name} must be >= 0")
        if self.model_dimension_D < 1 or self.total_iterations_T < 1:
            raise DomainError("model_dimension_D and total_iterations_T must be >= 1")
        if not self.stepsize_gamma >= 1:
            raise DomainError("stepsize_gamma must be >= 1")

    def with_T(self, T: int) -> "BoundInputs":
        return BoundInputs(**{**self.__dict__, "total_iterations_T": int(T)})


@dataclass(frozen=True)
class ErrorTerms:
    g_select_clip: float
    g_dp: float
    g_b_clip: float = 0.0

    def __post_init__(self):
        if min(self.g_select_clip, self.g_dp, self.g_b_clip) < 0:
            raise DomainError("error terms must be >= 0")


def _vec(p) -> np.ndarray:
    return p.probabilities if isinstance(p, SelectionProbabilities) else np.asarray(p, dtype=float)


def g_select_clip(p_s, p_u, clipping_gap: float, B2: float, C: float) -> float:
    """|p_s - p_u|_1 + clipping gap + B2 / C."""
    a, b = _vec(p_s), _vec(p_u)
    if a.shape != b.shape:
        raise DomainError(f"probability vectors differ in length: {a.size} vs {b.size}")
    if not C > 0 or clipping_gap < 0 or B2 < 0:
        raise DomainError("need C > 0, clipping_gap >= 0, B2 >= 0")
    return float(np.abs(a - b).sum()) + clipping_gap + B2 / C


def g_dp(p_s, noise_coefficients, D: int) -> float:
    """sum_k p_k^2 D V_k."""
    p, v = _vec(p_s), np.asarray(noise_coefficients, dtype=float)
    if p.shape != v.shape:
        raise DomainError(f"{p.size} probabilities but {v.size} noise coefficients")
    return float(D * np.dot(p * p, v))


def theorem1_bound(inputs: BoundInputs, terms: ErrorTerms) -> float:
    """Bound on sqrt(E[F(w_{T+1}) - F*]) for strongly convex objectives."""
    L, mu, B1, C = inputs.smoothness_L, inputs.strong_convexity_mu, inputs.gradient_bound_B1, inputs.clip_C
    T, beta, gamma, Gam = inputs.total_iterations_T, inputs.stepsize_beta, inputs.stepsize_gamma, inputs.gamma_tradeoff_Gamma
    if not beta > B1 / (C * mu):
        raise DomainError(f"stepsize condition beta > B1/(C*mu) violated: {beta} <= {B1 / (C * mu)}")
    ratio = T / (gamma + T)
    Z = math.sqrt(
        4.5 * L * Gam * gamma * inputs.initial_distance**2
        + (1 + 9 * Gam) / 2 * beta**2 * L * ratio * C**2
        + gamma * inputs.initial_gap
    )
    vanishing = Z / math.sqrt(gamma + T)
    clipping = math.sqrt(18 * Gam * beta * L * ratio * (B1 * C / mu) * terms.g_b_clip)
    G = terms.g_select_clip
    selection = math.sqrt(2 * L) * beta * C * ratio / 2 * (
        G + math.sqrt((1 + 1 / Gam) * G * G + (1 + 9 * Gam) * terms.g_dp)
    )
    return vanishing + clipping + selection


def theorem2_bound(inputs: BoundInputs, terms: ErrorTerms) -> float:
    """Bound on the root-mean-square gradient norm for smooth non-convex objectives.

    ``terms.g_dp`` is sum_k p_k^2 D V_k; the bound scales it by sqrt(T) L.
    """
    L, B1, T = inputs.smoothness_L, inputs.gradient_bound_B1, inputs.total_iterations_T
    G = terms.g_select_clip
    rt = math.sqrt(T)
    non_vanishing = B1 / 2 * (G + math.sqrt(G * G + 2 * terms.g_dp * rt * L))
    vanishing = math.sqrt(inputs.initial_gap / rt + 0.5 * L * B1**2 / rt)
    return non_vanishing + vanishing


def _corollary2_coefficients(inputs: BoundInputs, terms: ErrorTerms):
    A = terms.g_select_clip**2
    Q = 2 * terms.g_dp * inputs.smoothness_L
    R = inputs.initial_gap + 0.5 * inputs.smoothness_L * inputs.gradient_bound_B1**2
    return A, Q, R


def corollary2_f(inputs: BoundInputs, terms: ErrorTerms, T: float) -> float:
    """f(T) = (B1/2) sqrt(A + Q sqrt(T)) + sqrt(R / sqrt(T)), T treated as real."""
    A, Q, R = _corollary2_coefficients(inputs, terms)
    return inputs.gradient_bound_B1 / 2 * math.sqrt(A + Q * math.sqrt(T)) + math.sqrt(R / math.sqrt(T))


def corollary2_derivative(inputs: BoundInputs, terms: ErrorTerms, T: float) -> float:
    A, Q, R = _corollary2_coefficients(inputs, terms)
    rising = inputs.gradient_bound_B1 / 8 * Q / math.sqrt(A + Q * math.sqrt(T)) / math.sqrt(T) if Q else 0.0
    return rising - math.sqrt(R) / 4 * T ** -1.25


def corollary2_profile(inputs: BoundInputs, terms: ErrorTerms, T_grid) -> list:
    """Rows (T, f(T), sign of f'(T)) over an ascending grid of positive T."""
    grid = [int(t) for t in T_grid]
    if any(t < 1 for t in grid) or any(b < a for a, b in zip(grid, grid[1:])):
        raise DomainError("T_grid must be ascending positive integers")
    rows = []
    for T in grid:
        d = corollary2_derivative(inputs, terms, T)
        rows.append((T, corollary2_f(inputs, terms, T), int(np.sign(d))))
    return rows


def sign_changes(signs) -> int:
    nz = [s for s in signs if s != 0]
    return sum(1 for a, b in zip(nz, nz[1:]) if a != b)


@dataclass(frozen=True)
class ClippingGap:
    """|Delta_t|_1 under size weights and its p_s-weighted variant."""

    unbiased: float
    biased: float


def empirical_clipping_gap(architecture, weights, clients, C: float, p_s) -> ClippingGap:
    """Clipping gap of the global model ``weights``.

    For each example d of client k, q(d) = max(1, |g(d)|/C) / max(1, |grad F|/C)
    where grad F is the size-weighted mean of all per-example gradients. Entry
    k is mean_d |q(d) - 1| weighted by |M_k| / sum |M| (or by p_s[k] for the
    biased variant). ``clients`` is a sequence of (features, labels) pairs.
    """
    if not C > 0:
        raise DomainError(f"clip must be > 0, got {C!r}")
    p = _vec(p_s)
    if p.size != len(clients):
        raise DomainError(f"{p.size} probabilities for {len(clients)} clients")
    w = np.asarray(weights, dtype=float)
    grads = [architecture.per_example_gradients(w, np.asarray(X, float), np.asarray(y)) for X, y in clients]
    sizes = np.array([len(g) for g in grads], dtype=float)
    full = np.concatenate(grads).mean(axis=0)
    denom = max(1.0, float(np.linalg.norm(full)) / C)
    per_client = np.array([
        np.mean(np.abs(np.maximum(1.0, np.linalg.norm(g, axis=1) / C) / denom - 1.0)) for g in grads
    ])
    return ClippingGap(
        unbiased=float(np.dot(sizes / sizes.sum(), per_client)),
        biased=float(np.dot(p, per_client)),
    )
