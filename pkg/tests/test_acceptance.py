"""Acceptance gate: one test per criterion, each reporting a single pass/fail line.

Run with ``pytest tests/test_acceptance.py -v``; the lines are repeated in the
"acceptance criteria" section of the terminal summary.
"""

import time
from pathlib import Path

import mpmath as mp
import numpy as np
import pytest
from scipy.stats import spearmanr

from privaware.accounting import compute_noise_coefficient, PrivacyBudget
from privaware.bounds import (
    BoundInputs,
    ErrorTerms,
    corollary2_derivative,
    corollary2_profile,
    sign_changes,
    theorem1_bound,
    theorem2_bound,
)
from privaware.cli import main
from privaware.config import load_config
from privaware.experiment import run_experiment
from privaware.federation import ClientData, TrainingParams, client_update, run_federation
from privaware.models import MLP, LogisticRegression, Model, Quadratic, per_example_gradient
from privaware.selection import (
    SelectionProbabilities,
    SelectionProblem,
    full_participation_check,
    kkt_check,
    objective_value,
    oracle_solve,
    solve,
)

from .oracles import brute_force_simplex, noise_coefficient_mp, selection_objective_np, theorem1_mp, theorem2_mp

ROOT = Path(__file__).resolve().parents[1]
DESK = ROOT / "configs" / "desk_scale.toml"
CASE2 = "mixture(0.3,2,0.04,0.7,8,1)"

_RUNS = {}


def final_accuracy(cfg, policy, seed):
    """Cached final accuracy; criteria 8 and 9 share the Case-1 runs."""
    key = (cfg.config_hash(), policy, seed)
    if key not in _RUNS:
        _RUNS[key] = run_experiment(cfg, policy, seed).final["eval_accuracy"]
    return _RUNS[key]


def desk_config():
    return load_config(DESK, environ={}, policies=("privacy_aware", "unbiased", "biased_loss"))


# 1 ------------------------------------------------------------------------------------------------

def test_criterion_01_accounting_oracle(criterion):
    rng = np.random.default_rng(2024)
    grid = [(int(rng.integers(1, 100_000)), float(np.exp(rng.uniform(np.log(1e-3), np.log(20)))),
             float(np.exp(rng.uniform(np.log(1e-12), np.log(0.5)))), float(rng.uniform(1e-3, 1.0)))
            for _ in range(1000)]
    start = time.perf_counter()
    got = [compute_noise_coefficient(m, PrivacyBudget(e, d), r) for m, e, d, r in grid]
    elapsed = time.perf_counter() - start
    ref = [noise_coefficient_mp(m, e, d, r) for m, e, d, r in grid]
    worst = max(float(abs((mp.mpf(g) - v) / v)) for g, v in zip(got, ref))
    finite = all(np.isfinite(got))
    criterion(1, finite and worst <= 1e-12 and elapsed < 1.0,
              f"max rel err {worst:.2e} (<= 1e-12), all finite {finite}, {elapsed:.3f}s (< 1 s)")


# 2 ------------------------------------------------------------------------------------------------

def random_problem(rng, n):
    pu = rng.dirichlet(np.ones(n))
    pu = np.maximum(pu, 1e-3)
    pu /= pu.sum()
    V = np.exp(rng.uniform(np.log(1e-4), np.log(1.0), n))
    eta = float(np.exp(rng.uniform(np.log(0.01), np.log(1000))))
    return SelectionProblem(SelectionProbabilities(pu), V, int(rng.integers(1, 400)), eta)


def test_criterion_02_solver_optimality(criterion):
    rng = np.random.default_rng(7)
    start = time.perf_counter()
    worst_gap = -np.inf
    for i in range(100):
        n = 2 if i % 2 == 0 else 3
        pr = random_problem(rng, n)
        got = objective_value(pr, solve(pr))
        step = 1e-3 if n == 2 else 5e-3
        lattice = objective_value(pr, oracle_solve(pr, step))
        pu, V = pr.unbiased.probabilities, pr.noise_coefficients
        _, independent = brute_force_simplex(pu, V, pr.model_dimension, pr.eta, step, refine_rounds=3)
        worst_gap = max(worst_gap, got - lattice, got - independent)
    worst_kkt = 0.0
    for _ in range(50):
        pr = random_problem(rng, 50)
        worst_kkt = max(worst_kkt, kkt_check(pr, solve(pr)).stationarity_residual)
    elapsed = time.perf_counter() - start
    criterion(2, worst_gap <= 1e-4 and worst_kkt < 1e-6 and elapsed < 60,
              f"max(solve - oracle) {worst_gap:.2e} (<= 1e-4), max KKT residual N=50 {worst_kkt:.2e} "
              f"(< 1e-6), {elapsed:.1f}s (< 60 s)")


# 3 ------------------------------------------------------------------------------------------------

def test_criterion_03_convexity_and_full_participation(criterion):
    rng = np.random.default_rng(3)
    worst = -np.inf
    for _ in range(10_000):
        n = int(rng.integers(2, 8))
        pr = random_problem(rng, n)
        pu, V = pr.unbiased.probabilities, pr.noise_coefficients
        x, y = rng.dirichlet(np.ones(n)), rng.dirichlet(np.ones(n))
        a = rng.uniform()
        f = lambda p: selection_objective_np(p, pu, V, pr.model_dimension, pr.eta)  # noqa: E731
        worst = max(worst, f(a * x + (1 - a) * y) - a * f(x) - (1 - a) * f(y))
        pkg = objective_value(pr, a * x + (1 - a) * y) - a * objective_value(pr, x) - (1 - a) * objective_value(pr, y)
        worst = max(worst, pkg)
    min_p, all_full = np.inf, True
    for _ in range(300):
        pr = random_problem(rng, int(rng.integers(2, 60)))
        p = solve(pr).probabilities
        min_p = min(min_p, p.min())
        all_full &= full_participation_check(p, 1e-9)
    criterion(3, worst <= 1e-10 and all_full,
              f"max convexity violation {worst:.2e} (<= 1e-10) over 1e4 triples; min p_s {min_p:.2e} (> 1e-9)")


# 4 ------------------------------------------------------------------------------------------------

def test_criterion_04_eta_limits(criterion):
    rng = np.random.default_rng(4)
    worst0 = 0.0
    for _ in range(50):
        pr = random_problem(rng, int(rng.integers(2, 40)))
        pr0 = SelectionProblem(pr.unbiased, pr.noise_coefficients, pr.model_dimension, 0.0)
        worst0 = max(worst0, float(np.abs(solve(pr0).probabilities - pr.unbiased.probabilities).sum()))
    fixture = SelectionProblem.from_sizes([1, 1], [1.0, 4.0], 1, 1e6)
    p = solve(fixture).probabilities
    dist = float(np.abs(p - [0.8, 0.2]).max())
    criterion(4, worst0 < 1e-9 and dist < 1e-3,
              f"max |solve(eta=0) - p_u|_1 {worst0:.1e} (< 1e-9); eta=1e6 fixture {np.round(p, 4)} "
              f"off [0.8, 0.2] by {dist:.1e} (< 1e-3)")


# 5 ------------------------------------------------------------------------------------------------

def test_criterion_05_bound_evaluators(criterion):
    rng = np.random.default_rng(5)
    worst_rel = 0.0
    for _ in range(100):
        C, mu, B1 = rng.uniform(0.1, 3), rng.uniform(0.05, 2), rng.uniform(0.1, 5)
        i = BoundInputs(
            smoothness_L=rng.uniform(0.1, 10), strong_convexity_mu=mu, gradient_bound_B1=B1,
            dissimilarity_B2=rng.uniform(0, 1), clip_C=C, model_dimension_D=int(rng.integers(1, 1000)),
            total_iterations_T=int(rng.integers(1, 10**6)), stepsize_beta=B1 / (C * mu) * rng.uniform(1.01, 5),
            stepsize_gamma=rng.uniform(1, 50), gamma_tradeoff_Gamma=rng.uniform(0.01, 10),
            initial_gap=rng.uniform(0, 10), initial_distance=rng.uniform(0, 10),
        )
        t = ErrorTerms(rng.uniform(0, 2), rng.uniform(0, 1), rng.uniform(0, 1))
        r1 = theorem1_mp(i.smoothness_L, mu, B1, C, i.total_iterations_T, i.stepsize_beta, i.stepsize_gamma,
                         i.gamma_tradeoff_Gamma, i.initial_gap, i.initial_distance, t.g_select_clip, t.g_dp,
                         t.g_b_clip)
        r2 = theorem2_mp(i.smoothness_L, B1, i.total_iterations_T, i.initial_gap, t.g_select_clip, t.g_dp)
        worst_rel = max(worst_rel, abs(theorem1_bound(i, t) / float(r1) - 1), abs(theorem2_bound(i, t) / float(r2) - 1))

        # derivative against 50-digit central differences of the same profile
        T = float(np.exp(rng.uniform(np.log(4), np.log(1e6))))
        A = mp.mpf(t.g_select_clip) ** 2
        Q = 2 * mp.mpf(t.g_dp) * i.smoothness_L
        R = mp.mpf(i.initial_gap) + mp.mpf(i.smoothness_L) * mp.mpf(B1) ** 2 / 2
        f = lambda x: B1 / mp.mpf(2) * mp.sqrt(A + Q * mp.sqrt(x)) + mp.sqrt(R / mp.sqrt(x))  # noqa: E731
        h = mp.mpf(T) * mp.mpf(10) ** -15
        numeric = float((f(T + h) - f(T - h)) / (2 * h))
        analytic = corollary2_derivative(i, t, T)
        scale = float(mp.sqrt(R) / 4 * mp.mpf(T) ** mp.mpf(-1.25)) + abs(analytic)
        deriv_ok = abs(analytic - numeric) <= max(1e-6 * abs(numeric), 1e-13 * scale)
        if not deriv_ok:
            break
    fixture = BoundInputs(smoothness_L=1.0, gradient_bound_B1=1.0, clip_C=1.0, model_dimension_D=1,
                          total_iterations_T=1, initial_gap=50.0)
    rows = corollary2_profile(fixture, ErrorTerms(0.0, 1e-4), [2**k for k in range(1, 41)])
    flips = sign_changes([s for _, _, s in rows])
    criterion(5, worst_rel <= 1e-10 and deriv_ok and flips == 1,
              f"max rel err vs 50-digit re-evaluation {worst_rel:.1e} (<= 1e-10); derivative vs central "
              f"differences within 1e-6: {deriv_ok}; sign changes on T = 2..2^40: {flips} (== 1)")


# 6 ------------------------------------------------------------------------------------------------

def test_criterion_06_gradients(criterion):
    rng = np.random.default_rng(6)
    worst = {}
    for arch in (Quadratic(5), LogisticRegression(4, 3), MLP(4, 5, 3)):
        w_err = 0.0
        for _ in range(100):
            w = rng.normal(size=arch.dimension)
            x = rng.normal(size=arch.num_features)
            y = int(rng.integers(0, getattr(arch, "num_classes", 1)))
            g = per_example_gradient(Model(arch, w), x, y)
            fd = np.empty_like(w)
            for j in range(w.size):
                e = np.zeros_like(w)
                e[j] = 1e-6
                fd[j] = (arch.losses(w + e, x[None], np.array([y]))[0]
                         - arch.losses(w - e, x[None], np.array([y]))[0]) / 2e-6
            w_err = max(w_err, np.linalg.norm(g - fd) / max(np.linalg.norm(g), np.linalg.norm(fd), 1e-8))
        worst[arch.tag] = w_err
    ok = all(v < 1e-6 for v in worst.values())
    criterion(6, ok, "max relative FD error " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + " (< 1e-6)")


# 7 ------------------------------------------------------------------------------------------------

def test_criterion_07_federation_mechanics(criterion):
    start = time.perf_counter()
    rng = np.random.default_rng(7)
    # clipping invariant asserted on every step of a 100-round debug run
    X = rng.normal(size=(600, 4)) * 3
    y = rng.integers(0, 3, size=600)
    clients = [ClientData(k, X[100 * k:100 * (k + 1)], y[100 * k:100 * (k + 1)], PrivacyBudget(0.5 + k, 1e-5), 10)
               for k in range(6)]
    params = TrainingParams(100, 2, 3, 0.1, lr=0.5, debug=True)
    res = run_federation(LogisticRegression(4, 3), clients, params, np.full(6, 1 / 6), (X, y), seed=0)
    clip_ok = res.max_clipped_norm <= 0.1 * (1 + 1e-12) and res.clipped_steps == 600

    # Monte-Carlo noise variance with gradients clipped to 1e-4
    D, s2, steps = 10, 0.5, [0.2, 0.1, 0.3]
    mc_client = ClientData(0, rng.normal(size=(20, D)), np.zeros(20, dtype=np.int64), PrivacyBudget(1, 1e-5), 5)
    gen = np.random.default_rng(8)
    deltas = np.array([client_update(Quadratic(D), np.zeros(D), mc_client, s2, 3, 5, steps, 1e-4, gen).delta
                       for _ in range(10_000)])
    expected = s2 * sum(a * a for a in steps)
    var_err = float(np.max(np.abs(deltas.var(axis=0) / expected - 1)))

    # noiseless quadratic run reaches w^{b,*} = sum_k p_k x_k
    xs = np.array([[1.0, -1.0], [4.0, 2.0], [-2.0, 0.5]])
    p = np.array([0.5, 0.3, 0.2])
    qclients = [ClientData(k, xs[k:k + 1], np.zeros(1, dtype=np.int64), PrivacyBudget(1, 1e-5), 1) for k in range(3)]
    qparams = TrainingParams(100, 2, 3, 1e3, lr=0.3, dp_noise=False, aggregation="expected")
    qres = run_federation(Quadratic(2), qclients, qparams, p, (xs, np.zeros(3, dtype=np.int64)), seed=0)
    dist = float(np.linalg.norm(qres.model.parameters - p @ xs))
    elapsed = time.perf_counter() - start
    criterion(7, clip_ok and var_err <= 0.05 and dist < 1e-6 and elapsed < 30,
              f"clip invariant on 600 debug steps {clip_ok}; noise variance rel err {var_err:.3f} (<= 0.05); "
              f"|w - w_b*| {dist:.1e} (< 1e-6); {elapsed:.1f}s (< 30 s)")


# 8 ------------------------------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_08_desk_scale_headline(criterion):
    cfg = desk_config()
    start = time.perf_counter()
    acc = {pol: np.array([final_accuracy(cfg, pol, s) for s in cfg.seeds])
           for pol in ("privacy_aware", "unbiased", "biased_loss")}
    elapsed = time.perf_counter() - start
    pa, un, bl = acc["privacy_aware"], acc["unbiased"], acc["biased_loss"]
    gain = 100 * (pa.mean() - un.mean())
    stable = int(np.sum((pa > un) & (pa >= bl)))
    ok = gain >= 3 and pa.mean() >= bl.mean() and stable >= 4 and elapsed < 600
    criterion(8, ok,
              f"mean acc privacy_aware {pa.mean():.4f}, unbiased {un.mean():.4f}, biased_loss {bl.mean():.4f}; "
              f"gain {gain:.2f} pp (>= 3); ordering holds on {stable}/5 seeds (>= 4); {elapsed:.0f}s (< 600 s)")


# 9 ------------------------------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_09_trends(criterion):
    cfg = desk_config()
    batches = [32, 64, 128, 256]
    by_batch = {b: [final_accuracy(cfg.replace(**{"training.batch_size": b}), "privacy_aware", s) for s in cfg.seeds]
                for b in batches}
    means = [float(np.mean(by_batch[b])) for b in batches]
    rho_means = spearmanr(batches, means).statistic
    pooled = spearmanr(np.repeat(batches, len(cfg.seeds)), np.concatenate([by_batch[b] for b in batches])).statistic

    gaps = {}
    for name, spec in (("case1", cfg.clients.budget_spec), ("case2", CASE2)):
        variant = cfg.replace(**{"clients.budget_spec": spec})
        gaps[name] = float(np.mean([final_accuracy(variant, "privacy_aware", s) - final_accuracy(variant, "unbiased", s)
                                    for s in cfg.seeds]))
    ok = rho_means > 0 and pooled > 0 and gaps["case1"] > gaps["case2"]
    criterion(9, ok,
              f"batch means {dict(zip(batches, (round(m, 4) for m in means)))}, Spearman {rho_means:.2f} "
              f"(pooled over seeds {pooled:.2f}) (> 0); gap case1 {100 * gaps['case1']:.2f} pp > "
              f"case2 {100 * gaps['case2']:.2f} pp")


# 10 -----------------------------------------------------------------------------------------------

SMALL = """\
seed = 5
seeds = [0, 1]

[clients]
num_clients = 10
total_examples = 1000
eval_examples = 200
num_classes = 3
feature_dim = 4
budget_spec = "uniform(0,1)"

[training]
global_rounds = 8
local_rounds = 2
per_round = 3
batch_size = 16
candidates = 6

[selection]
eta = 100.0
"""


def test_criterion_10_determinism(criterion, tmp_path):
    cfg = tmp_path / "c.toml"
    cfg.write_text(SMALL, encoding="utf-8")
    same = True
    for policy in ("privacy_aware", "unbiased", "biased_loss"):
        for run in ("a", "b"):
            assert main(["simulate", str(cfg), "--policy", policy, "--output-dir", str(tmp_path / policy / run)]) == 0
        same &= (tmp_path / policy / "a" / "rounds.csv").read_bytes() == (tmp_path / policy / "b" / "rounds.csv").read_bytes()
    for run in ("a", "b"):
        assert main(["sweep", str(cfg), "--parameter", "eta", "--values", "1", "1000",
                     "--output-dir", str(tmp_path / "sweep" / run)]) == 0
    for name in ("sweep_eta.csv", "sweep_eta_plot.csv"):
        same &= (tmp_path / "sweep" / "a" / name).read_bytes() == (tmp_path / "sweep" / "b" / name).read_bytes()
    criterion(10, same, f"repeated simulate (3 policies) and sweep runs byte-identical: {same}")
