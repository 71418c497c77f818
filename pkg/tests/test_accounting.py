import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from privaware.accounting import (
    ClientProfile,
    PrivacyBudget,
    amplified_epsilon,
    compute_noise_coefficient,
    gaussian_mechanism_variance,
    per_client_sigma_squared,
    strong_composition_variance,
)
from privaware.errors import DomainError

from .oracles import noise_coefficient_mp

# Frozen from tests/oracles.py at 50 digits.
GAUSS_1_1_1e5 = 23.4721380325689
STRONG_1_1_1 = 10.5060935001458
AMP_05_01 = 2.0131965930228
X1 = 0.0977115742592792


def test_gaussian_mechanism_golden():
    b = PrivacyBudget(1.0, 1e-5)
    v = gaussian_mechanism_variance(1.0, b)
    assert v == pytest.approx(GAUSS_1_1_1e5, rel=1e-12)
    assert gaussian_mechanism_variance(0.5, b) == pytest.approx(v / 4, rel=1e-15)
    assert gaussian_mechanism_variance(1.0, PrivacyBudget(2.0, 1e-5)) == pytest.approx(v / 4, rel=1e-15)


@pytest.mark.parametrize("sens", [0.0, -1.0])
def test_gaussian_mechanism_rejects_bad_sensitivity(sens):
    with pytest.raises(DomainError):
        gaussian_mechanism_variance(sens, PrivacyBudget(1.0, 1e-5))


@pytest.mark.parametrize("eps,delta", [(0, 1e-5), (-1, 1e-5), (1, 0), (1, 1.5), (math.inf, 0.1)])
def test_budget_validation(eps, delta):
    with pytest.raises(DomainError):
        PrivacyBudget(eps, delta)


def test_strong_composition():
    b = PrivacyBudget(1.0, 1.0)
    one = strong_composition_variance(1.0, b, 1)
    assert one == pytest.approx(STRONG_1_1_1, rel=1e-12)
    assert strong_composition_variance(1.0, b, 10) == pytest.approx(10 * one, rel=1e-15)
    assert strong_composition_variance(2.0, b, 1) == pytest.approx(4 * one, rel=1e-15)
    with pytest.raises(DomainError):
        strong_composition_variance(1.0, b, 0)


def test_amplified_epsilon():
    assert amplified_epsilon(1.0, 1.0) == pytest.approx(1.0, rel=1e-15)
    assert amplified_epsilon(0.5, 0.1) == pytest.approx(AMP_05_01, rel=1e-12)
    assert abs(amplified_epsilon(1e-8, 0.1) - 1e-7) < 1e-12
    # large budgets stay finite
    assert amplified_epsilon(800.0, 0.01) == pytest.approx(800 - math.log(0.01), rel=1e-12)
    for bad in (0.0, 1.5, -0.1):
        with pytest.raises(DomainError):
            amplified_epsilon(1.0, bad)


def test_noise_coefficient_golden():
    b = PrivacyBudget(1.0, 1e-5)
    x1 = compute_noise_coefficient(100, b, 0.1)
    assert x1 == pytest.approx(X1, rel=1e-12)
    assert compute_noise_coefficient(200, b, 0.1) == pytest.approx(x1 / 4, rel=1e-14)
    assert compute_noise_coefficient(100, PrivacyBudget(0.5, 1e-5), 0.1) > compute_noise_coefficient(
        100, PrivacyBudget(2.0, 1e-5), 0.1
    )


def test_noise_coefficient_is_two_lemma_composition():
    # amplification, then composition at (eps', delta/r) with sensitivity 1/(r|M|)
    size, eps, delta, r = 300, 0.7, 1e-6, 0.2
    eps_p = amplified_epsilon(eps, r)
    expected = 8 * (1 / (r * size)) ** 2 * math.log(math.e + eps_p / (delta / r)) / eps_p**2
    assert compute_noise_coefficient(size, PrivacyBudget(eps, delta), r) == pytest.approx(expected, rel=1e-13)


def test_noise_coefficient_matches_oracle_on_grid():
    rng = np.random.default_rng(20240601)
    worst = 0.0
    for _ in range(200):
        eps = float(np.exp(rng.uniform(np.log(1e-3), np.log(20))))
        delta = float(np.exp(rng.uniform(np.log(1e-8), np.log(1e-2))))
        r = float(rng.uniform(0.01, 1.0))
        size = int(np.exp(rng.uniform(np.log(10), np.log(1e6))))
        got = compute_noise_coefficient(size, PrivacyBudget(eps, delta), r)
        ref = float(noise_coefficient_mp(size, eps, delta, r))
        assert math.isfinite(got)
        worst = max(worst, abs(got - ref) / ref)
    assert worst < 1e-12


@given(
    eps=st.floats(1e-3, 20),
    size=st.integers(10, 10**6),
    r=st.floats(0.01, 1.0),
)
def test_noise_coefficient_monotone(eps, size, r):
    b = PrivacyBudget(eps, 1e-5)
    v = compute_noise_coefficient(size, b, r)
    assert v > 0
    assert compute_noise_coefficient(size, PrivacyBudget(eps * 1.5, 1e-5), r) < v
    assert compute_noise_coefficient(size + 1, b, r) < v


def test_per_client_sigma_squared():
    prof = ClientProfile(0, 100, PrivacyBudget(1.0, 1e-5), 0.1)
    assert prof.noise_coefficient == pytest.approx(X1, rel=1e-12)
    assert per_client_sigma_squared(prof, 0, 2, 1.0) == 0.0
    assert per_client_sigma_squared(prof, 5, 2, 1.0) == pytest.approx(10 * X1, rel=1e-12)
    base = per_client_sigma_squared(prof, 3, 4, 0.7)
    assert per_client_sigma_squared(prof, 3, 4, 1.4) == pytest.approx(4 * base, rel=1e-14)
    assert per_client_sigma_squared(prof, 6, 4, 0.7) == pytest.approx(2 * base, rel=1e-14)
    assert per_client_sigma_squared(prof, 3, 8, 0.7) == pytest.approx(2 * base, rel=1e-14)
    with pytest.raises(DomainError):
        per_client_sigma_squared(prof, 1, 1, 0.0)


def test_profile_validation():
    with pytest.raises(DomainError):
        ClientProfile(0, 0, PrivacyBudget(1.0, 1e-5), 0.1)
    with pytest.raises(DomainError):
        ClientProfile(0, 10, PrivacyBudget(1.0, 1e-5), 0.0)
    with pytest.raises(TypeError):
        ClientProfile(0, 10, PrivacyBudget(1.0, 1e-5), 0.1, noise_coefficient=3.0)
