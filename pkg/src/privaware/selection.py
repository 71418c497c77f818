"""Client selection probabilities.

The privacy-aware policy minimises, over the probability simplex,

    F(p) = |p - p_u|_1 + sqrt(|p - p_u|_1^2 + eta * sum_k p_k^2 D V_k)

where p_u is the size-proportional (unbiased) policy and V_k the clients'
noise coefficients. F is convex, so every KKT point is a global minimiser.

Writing S for the square-root term and c = 1 + |p - p_u|_1 / S, stationarity
reads ``sign_k * c + eta D V_k p_k / S = theta`` for a common theta, with
sign_k free in [-1, 1] when p_k == p_u[k]. Substituting a = (theta - c) S / (eta D)
and b = (theta + c) S / (eta D) gives

    p_k = clamp(p_u[k], a / V_k, b / V_k),      F(p) = (b - a) eta D / 2.

The default solver exploits this: for a gap d = b - a the offset a is fixed by
sum(p) = 1 (a piecewise-linear equation solved exactly), and d is the root of
F(p(d)) - d eta D / 2. Projected subgradient descent is kept as an
alternative method and as an independent cross-check.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq

from .errors import ConvergenceError, DomainError

__all__ = [
    "SelectionProbabilities",
    "SelectionProblem",
    "KktCertificate",
    "Schedule",
    "unbiased_probabilities",
    "objective_value",
    "objective_subgradient",
    "objective_lipschitz_bound",
    "project_simplex",
    "solve",
    "oracle_solve",
    "kkt_check",
    "full_participation_check",
    "biased_loss_selection",
    "sample_schedule",
]

SIMPLEX_ATOL = 1e-9


@dataclass(frozen=True, eq=False)
class SelectionProbabilities:
    probabilities: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probabilities, dtype=float)
        if p.ndim != 1 or p.size == 0:
            raise DomainError("selection probabilities must be a non-empty vector")
        if np.any(~np.isfinite(p)) or np.any(p < 0):
            raise DomainError("selection probabilities must be finite and non-negative")
        if abs(p.sum() - 1.0) > SIMPLEX_ATOL:
            raise DomainError(f"selection probabilities sum to {p.sum()!r}, not 1")
        p.setflags(write=False)
        object.__setattr__(self, "probabilities", p)

    def __len__(self):
        return self.probabilities.size

    def __array__(self, dtype=None, copy=None):
        return self.probabilities if dtype is None else self.probabilities.astype(dtype)


def _as_vector(p) -> np.ndarray:
    if isinstance(p, SelectionProbabilities):
        return p.probabilities
    return np.asarray(p, dtype=float)


@dataclass(frozen=True, eq=False)
class SelectionProblem:
    """Inputs of the privacy-aware selection problem.

    ``eta`` plays the role of D * sqrt(T L) in the convergence bound; since L
    is unknown it is exposed as a free knob.
    """

    unbiased: SelectionProbabilities
    noise_coefficients: np.ndarray
    model_dimension: int
    eta: float

    def __post_init__(self):
        if not isinstance(self.unbiased, SelectionProbabilities):
            object.__setattr__(self, "unbiased", SelectionProbabilities(self.unbiased))
        v = np.asarray(self.noise_coefficients, dtype=float)
        if v.shape != self.unbiased.probabilities.shape:
            raise DomainError(
                f"{v.size} noise coefficients for {len(self.unbiased)} clients"
            )
        if np.any(~np.isfinite(v)) or np.any(v < 0):
            raise DomainError("noise coefficients must be finite and non-negative")
        if int(self.model_dimension) != self.model_dimension or self.model_dimension < 1:
            raise DomainError(f"model_dimension must be a positive integer, got {self.model_dimension!r}")
        if not (math.isfinite(self.eta) and self.eta >= 0):
            raise DomainError(f"eta must be >= 0, got {self.eta!r}")
        v.setflags(write=False)
        object.__setattr__(self, "noise_coefficients", v)

    @classmethod
    def from_sizes(cls, dataset_sizes, noise_coefficients, model_dimension: int, eta: float):
        return cls(unbiased_probabilities(dataset_sizes), noise_coefficients, model_dimension, eta)

    @property
    def size(self) -> int:
        return len(self.unbiased)


@dataclass(frozen=True)
class KktCertificate:
    stationarity_residual: float
    complementarity_residual: float
    primal_feasibility_residual: float
    multiplier_lambda: float
    multipliers_mu: np.ndarray


@dataclass(frozen=True, eq=False)
class Schedule:
    """Pre-sampled participants: ``slots[t]`` lists the clients of round t."""

    slots: np.ndarray
    counts: np.ndarray

    @property
    def rounds(self) -> int:
        return self.slots.shape[0]


def unbiased_probabilities(dataset_sizes) -> SelectionProbabilities:
    sizes = np.asarray(dataset_sizes)
    if sizes.ndim != 1 or sizes.size == 0:
        raise DomainError("dataset_sizes must be a non-empty vector")
    if np.any(sizes < 1):
        raise DomainError("every dataset size must be >= 1")
    sizes = sizes.astype(float)
    return SelectionProbabilities(sizes / sizes.sum())


def _check_candidate(problem: SelectionProblem, candidate) -> np.ndarray:
    p = _as_vector(candidate)
    if p.shape != (problem.size,):
        raise DomainError(f"candidate has shape {p.shape}, expected ({problem.size},)")
    return p


def _terms(problem: SelectionProblem, p: np.ndarray):
    pu = problem.unbiased.probabilities
    dev = p - pu
    l1 = np.abs(dev).sum()
    quad = problem.eta * problem.model_dimension * np.dot(p * p, problem.noise_coefficients)
    return dev, l1, math.sqrt(l1 * l1 + quad)


def objective_value(problem: SelectionProblem, candidate) -> float:
    p = _check_candidate(problem, candidate)
    _, l1, root = _terms(problem, p)
    return l1 + root


def objective_subgradient(problem: SelectionProblem, candidate) -> np.ndarray:
    """A subgradient of the objective; d|x|/dx at 0 is taken as 0."""
    p = _check_candidate(problem, candidate)
    dev, l1, root = _terms(problem, p)
    s = np.sign(dev)
    if root == 0.0:
        return s
    scale = problem.eta * problem.model_dimension
    return s + (l1 * s + scale * problem.noise_coefficients * p) / root


def objective_lipschitz_bound(problem: SelectionProblem) -> float:
    """Bound on the sup-norm of any subgradient over the simplex."""
    vmax = float(problem.noise_coefficients.max())
    return 2.0 + math.sqrt(problem.eta * problem.model_dimension * vmax)


def project_simplex(y) -> np.ndarray:
    """Euclidean projection onto the probability simplex (sort and threshold)."""
    y = np.asarray(y, dtype=float)
    u = np.sort(y)[::-1]
    css = np.cumsum(u) - 1.0
    ks = np.arange(1, y.size + 1)
    rho = np.nonzero(u - css / ks > 0)[0][-1]
    theta = css[rho] / (rho + 1)
    return np.maximum(y - theta, 0.0)


# -- threshold (KKT-structured) solver --------------------------------------


def _clamped(pu, v, a, d):
    return np.minimum(np.maximum(pu, a / v), (a + d) / v)


def _offset_for_gap(pu: np.ndarray, v: np.ndarray, d: float) -> float:
    """Exact a with sum_k clamp(pu_k, a/v_k, (a+d)/v_k) == 1.

    The sum is continuous, non-decreasing and piecewise linear in a with kinks
    at v_k pu_k - d and v_k pu_k, so locate the bracketing kinks and
    interpolate.
    """
    knots = np.unique(np.concatenate([v * pu - d, v * pu]))
    sums = np.array([_clamped(pu, v, a, d).sum() for a in knots])
    inv = (1.0 / v).sum()
    j = int(np.searchsorted(sums, 1.0))
    if j == 0:
        # left of every knot each coordinate sits on its upper bound
        return (1.0 - sums[0]) / inv + knots[0]
    if j == knots.size:
        return (1.0 - sums[-1]) / inv + knots[-1]
    lo, hi = knots[j - 1], knots[j]
    s_lo, s_hi = sums[j - 1], sums[j]
    if s_hi == s_lo:
        return hi
    return lo + (1.0 - s_lo) * (hi - lo) / (s_hi - s_lo)


def _threshold_solve(problem: SelectionProblem) -> np.ndarray:
    pu = problem.unbiased.probabilities.copy()
    v = problem.noise_coefficients
    scale = problem.eta * problem.model_dimension
    if scale == 0.0 or not np.any(v > 0) or pu.size == 1:
        return pu
    # A noiseless client would make a / v_k singular; a tiny positive floor
    # keeps the map well defined and changes the optimum by O(floor).
    v = np.maximum(v, v.max() * 1e-12)

    def point(d):
        return _clamped(pu, v, _offset_for_gap(pu, v, d), d)

    def gap_equation(d):
        return objective_value(problem, point(d)) - d * scale / 2.0

    lo = 0.0
    hi = 2.0 * objective_value(problem, pu) / scale
    while gap_equation(hi) > 0:
        lo, hi = hi, 2.0 * hi
        if not math.isfinite(hi):
            raise ConvergenceError("could not bracket the optimal gap", best=pu)
    if gap_equation(lo) <= 0:
        d = lo
    else:
        d = brentq(gap_equation, lo, hi, xtol=1e-300, rtol=4 * np.finfo(float).eps, maxiter=500)
    p = point(d)
    if np.any(p < 0):
        raise ConvergenceError("threshold solution left the simplex", best=p)
    return p


# -- projected subgradient --------------------------------------------------


def _subgradient_solve(problem, tolerance, max_iterations, step_scale, window=100):
    x = problem.unbiased.probabilities.copy()
    best, best_val = x.copy(), objective_value(problem, x)
    history = [best_val]
    for t in range(1, max_iterations + 1):
        g = objective_subgradient(problem, x)
        gnorm = np.linalg.norm(g)
        if gnorm == 0.0:
            return x, 0.0
        x = project_simplex(x - step_scale / math.sqrt(t) * g / gnorm)
        val = objective_value(problem, x)
        if val < best_val:
            best, best_val = x.copy(), val
        history.append(best_val)
        if t >= window and history[-window - 1] - best_val < tolerance:
            return best, history[-window - 1] - best_val
    raise ConvergenceError(
        f"subgradient descent did not converge in {max_iterations} iterations",
        best=SelectionProbabilities(best / best.sum()),
        residual=history[-window - 1] - best_val if len(history) > window else float("nan"),
    )


def solve(
    problem: SelectionProblem,
    tolerance: float = 1e-8,
    max_iterations: int = 200_000,
    *,
    method: str = "threshold",
    step_scale: float = 0.1,
) -> SelectionProbabilities:
    """Minimise the privacy-aware objective over the simplex.

    ``method="threshold"`` (default) solves the KKT system directly and is
    exact up to floating point. ``method="subgradient"`` runs projected
    subgradient descent with steps ``step_scale / sqrt(t)`` along the
    normalised subgradient, stopping once the best objective improves by less
    than ``tolerance`` over 100 iterations.
    """
    if not tolerance > 0:
        raise DomainError(f"tolerance must be > 0, got {tolerance!r}")
    if problem.eta == 0.0:
        return problem.unbiased
    if method == "threshold":
        p = _threshold_solve(problem)
    elif method == "subgradient":
        p, _ = _subgradient_solve(problem, tolerance, max_iterations, step_scale)
    else:
        raise DomainError(f"unknown solver method {method!r}")
    return SelectionProbabilities(p / p.sum() if abs(p.sum() - 1.0) > 1e-12 else p)


def oracle_solve(problem: SelectionProblem, grid_step: float, refine: int = 0) -> SelectionProbabilities:
    """Brute-force minimiser over the simplex lattice with spacing ``grid_step``.

    ``refine`` extra passes re-search a 21-point-per-axis local lattice around
    the incumbent, shrinking the window tenfold each time.
    """
    n = problem.size
    if n > 4:
        raise DomainError(f"oracle_solve enumerates the lattice and refuses N={n} > 4")
    m = int(round(1.0 / grid_step))
    if m < 1 or abs(m * grid_step - 1.0) > 1e-9:
        raise DomainError(f"grid_step must divide 1, got {grid_step!r}")
    # enumerate compositions of m into n parts as an array
    heads = np.array([h for h in itertools.product(range(m + 1), repeat=n - 1) if sum(h) <= m], dtype=float)
    heads = heads.reshape(-1, n - 1)
    pts = np.column_stack([heads, m - heads.sum(axis=1)]) / m
    vals = _batch_objective(problem, pts)
    best = pts[int(np.argmin(vals))]
    width = grid_step
    for _ in range(refine):
        offs = np.array(list(itertools.product(np.linspace(-width, width, 21), repeat=n - 1)))
        cand = np.column_stack([best[:-1] + offs, np.zeros(len(offs))])
        cand[:, -1] = 1.0 - cand[:, :-1].sum(axis=1)
        cand = cand[np.all(cand >= 0, axis=1)]
        cvals = _batch_objective(problem, cand)
        i = int(np.argmin(cvals))
        if cvals[i] < objective_value(problem, best):
            best = cand[i]
        width /= 10.0
    return SelectionProbabilities(best)


def _batch_objective(problem: SelectionProblem, pts: np.ndarray) -> np.ndarray:
    pu = problem.unbiased.probabilities
    l1 = np.abs(pts - pu).sum(axis=1)
    quad = problem.eta * problem.model_dimension * (pts**2 @ problem.noise_coefficients)
    return l1 + np.sqrt(l1**2 + quad)


def kkt_check(problem: SelectionProblem, candidate, kink_tol: float = 1e-12, zero_tol: float = 0.0) -> KktCertificate:
    """Residuals of the KKT system at ``candidate``.

    Every coordinate contributes the set of values ``dF/dp_k - mu_k`` can take:
    a point off the kinks, an interval where ``|p_k - p_u[k]| <= kink_tol``
    (subgradient sign in [-1, 1]), extended downward without limit where
    ``p_k <= zero_tol`` (active non-negativity constraint). The common
    multiplier -lambda is placed to minimise the largest distance to those
    sets; that distance is the stationarity residual.
    """
    p = _check_candidate(problem, candidate)
    dev, l1, root = _terms(problem, p)
    scale = problem.eta * problem.model_dimension
    at_kink = np.abs(dev) <= kink_tol
    sign = np.where(at_kink, 0.0, np.sign(dev))
    if root == 0.0:
        c, smooth = 1.0, np.zeros_like(p)
    else:
        c = 1.0 + l1 / root
        smooth = scale * problem.noise_coefficients * p / root
    centre = sign * c + smooth
    upper = np.where(at_kink, smooth + c, centre)
    lower = np.where(at_kink, smooth - c, centre)
    active = p <= zero_tol
    lower = np.where(active, -np.inf, lower)

    max_lower, min_upper = lower.max(), upper.min()
    if max_lower <= min_upper:
        # any theta in the common intersection; prefer 0, else nearest endpoint
        theta = min(max(0.0, max_lower), min_upper) if math.isfinite(max_lower) else min(0.0, min_upper)
        stationarity = 0.0
    else:
        theta = 0.5 * (max_lower + min_upper)
        stationarity = 0.5 * (max_lower - min_upper)
    # mu_k absorbs the part of dF/dp_k above theta on active coordinates only
    mu = np.where(active, np.maximum(upper - theta, 0.0), 0.0)
    complementarity = float(np.max(np.abs(mu * p))) if p.size else 0.0
    feasibility = abs(p.sum() - 1.0) + max(0.0, -float(p.min()))
    return KktCertificate(
        stationarity_residual=float(stationarity),
        complementarity_residual=complementarity,
        primal_feasibility_residual=float(feasibility),
        multiplier_lambda=float(-theta) + 0.0,
        multipliers_mu=mu,
    )


def full_participation_check(candidate, floor: float = 1e-9) -> bool:
    return bool(_as_vector(candidate).min() > floor)


def biased_loss_selection(local_losses, count: int) -> list[int]:
    """Indices of the ``count`` largest losses, ties to the lowest index."""
    losses = np.asarray(local_losses, dtype=float)
    if count < 1 or count > losses.size:
        raise DomainError(f"cannot select {count} of {losses.size} clients")
    order = np.lexsort((np.arange(losses.size), -losses))
    return sorted(int(i) for i in order[:count])


def sample_schedule(probabilities, rounds: int, per_round: int, seed) -> Schedule:
    """Draw ``per_round`` clients per round with replacement, for all rounds up front.

    ``seed`` may be an int or anything ``numpy.random.default_rng`` accepts.
    """
    p = _as_vector(probabilities)
    if rounds < 1 or per_round < 1:
        raise DomainError("rounds and per_round must be >= 1")
    rng = np.random.default_rng(seed)
    slots = rng.choice(p.size, size=(rounds, per_round), replace=True, p=p / p.sum())
    counts = np.bincount(slots.ravel(), minlength=p.size)
    return Schedule(slots=slots, counts=counts)
