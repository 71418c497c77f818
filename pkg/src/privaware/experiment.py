"""Experiment orchestration: build clients, pick a selection policy, run, report.

Every random choice derives from the master seed through a purpose tag
(``data``, ``sizes``, ``partition``, ``budgets`` here; ``schedule``,
``client`` and friends inside the federation), so a (config, seed) pair fully
determines a run.
"""

from __future__ import annotations

import json
import math
import os
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .accounting import per_client_sigma_squared
from .bounds import BoundInputs, ErrorTerms, g_dp, g_select_clip, theorem1_bound, theorem2_bound
from .config import POLICY_NAMES, FederationConfig
from .data import partition_noniid, sample_budgets, sample_sizes, synth_blobs
from .errors import ConsistencyError, ConvergenceError, DomainError
from .federation import ClientData, FederationResult, TrainingParams, run_federation
from .manifest import read_manifest
from .models import MLP, Architecture, LogisticRegression, Quadratic
from .seeding import derive_seed
from .selection import SelectionProblem, kkt_check, objective_value, solve

__all__ = [
    "ROUNDS_HEADER",
    "SWEEP_HEADER",
    "PLOT_HEADER",
    "SWEEP_PARAMETERS",
    "ExperimentSetup",
    "ExperimentResult",
    "build_setup",
    "selection_for",
    "run_experiment",
    "audit_sigma",
    "rounds_csv",
    "compare_policies",
    "run_sweep",
    "sweep_csv",
    "plot_csv",
    "write_atomic",
]

ROUNDS_HEADER = ("round", "train_loss", "eval_loss", "eval_accuracy", "mean_noise_norm", "selected_ids")
SWEEP_HEADER = ("parameter", "value", "policy", "seed", "final_accuracy", "final_eval_loss", "status")
PLOT_HEADER = ("x", "policy", "mean", "stddev")
SWEEP_PARAMETERS = {
    "eta": ("selection.eta", float),
    "batch_size": ("training.batch_size", int),
    "budget_spec": ("clients.budget_spec", str),
    "similarity": ("clients.similarity", float),
}


@dataclass(frozen=True, eq=False)
class ExperimentSetup:
    architecture: Architecture
    clients: list
    eval_set: tuple


def make_model(cfg: FederationConfig) -> Architecture:
    c, m = cfg.clients, cfg.model
    if m.architecture == "quadratic":
        return Quadratic(c.feature_dim)
    if m.architecture == "logistic_regression":
        return LogisticRegression(c.feature_dim, c.num_classes)
    return MLP(c.feature_dim, m.hidden, c.num_classes)


def build_setup(cfg: FederationConfig, seed: int) -> ExperimentSetup:
    """Synthesize client data for ``seed`` from the generation spec or the manifest.

    With a manifest the listed sizes and budgets are used verbatim and each
    client's batch is round(r * size), so the realised ratio is batch / size.
    """
    c = cfg.clients
    if c.manifest is not None:
        profiles = read_manifest(c.manifest)
        sizes = [p.dataset_size for p in profiles]
        budgets = [p.budget for p in profiles]
        batches = [min(s, max(1, int(round(p.subsampling_ratio * s)))) for p, s in zip(profiles, sizes)]
        ids = [p.id for p in profiles]
    else:
        sizes = list(sample_sizes(c.total_examples, c.num_clients, derive_seed(seed, "sizes")))
        budgets = sample_budgets(c.num_clients, c.budget_spec, derive_seed(seed, "budgets"), c.delta)
        batches = [min(cfg.training.batch_size, s) for s in sizes]
        ids = list(range(c.num_clients))
    total = int(sum(sizes))
    data = synth_blobs(c.num_classes, c.feature_dim, total + c.eval_examples, c.spread, derive_seed(seed, "data"))
    train = data.subset(np.arange(total))
    evaluation = data.subset(np.arange(total, total + c.eval_examples))
    part = partition_noniid(train.labels, sizes, c.similarity, derive_seed(seed, "partition"))
    clients = [
        ClientData(cid, train.features[ix], train.labels[ix], budget, batch)
        for cid, ix, budget, batch in zip(ids, part.indices, budgets, batches)
    ]
    return ExperimentSetup(make_model(cfg), clients, (evaluation.features, evaluation.labels))


def selection_problem(cfg: FederationConfig, setup: ExperimentSetup, eta: float | None = None) -> SelectionProblem:
    V = [c.profile().noise_coefficient for c in setup.clients]
    eta = cfg.selection.eta if eta is None else eta
    return SelectionProblem.from_sizes([c.size for c in setup.clients], V, setup.architecture.dimension,
                                       0.0 if eta is None else eta)


def selection_for(policy: str, cfg: FederationConfig, setup: ExperimentSetup):
    """(problem, probabilities, federation policy) for a named selection policy."""
    if policy not in POLICY_NAMES:
        raise DomainError(f"selection.policy: must be one of {POLICY_NAMES}")
    problem = selection_problem(cfg, setup)
    if policy == "privacy_aware":
        if cfg.selection.eta is None:
            raise DomainError("selection.eta: is required for the privacy_aware policy")
        return problem, solve(problem), "probabilistic"
    return problem, problem.unbiased, "probabilistic" if policy == "unbiased" else "biased_loss"


def training_params(cfg: FederationConfig) -> TrainingParams:
    t = cfg.training
    return TrainingParams(
        global_rounds=t.global_rounds, local_rounds=t.local_rounds, per_round=t.per_round, clip=t.clip,
        schedule=t.schedule, lr=t.lr, beta=t.beta, gamma=t.gamma, B1=t.B1, dp_noise=t.dp_noise,
        aggregation=t.aggregation, apply_server_stepsize=t.apply_server_stepsize, candidates=t.candidates,
    )


@dataclass
class ExperimentResult:
    config_hash: str
    policy: str
    seed: int
    records: list
    final: dict
    probabilities: np.ndarray
    unbiased: np.ndarray
    client_ids: list
    dataset_sizes: list
    budgets: list
    noise_coefficients: np.ndarray
    counts: np.ndarray
    sigma_sq: np.ndarray
    objective: float
    kkt_residual: float
    model_dimension: int = 1
    bounds: dict | None = None
    extras: dict = field(default_factory=dict)

    def summary(self) -> dict:
        return {
            "config_hash": self.config_hash,
            "policy": self.policy,
            "seed": self.seed,
            "model_dimension": int(self.model_dimension),
            "final": self.final,
            "objective": self.objective,
            "kkt_stationarity_residual": self.kkt_residual,
            "bounds": self.bounds,
            "clients": [
                {
                    "id": cid, "dataset_size": size, "epsilon": b.epsilon, "delta": b.delta,
                    "noise_coefficient": float(v), "p_u": float(pu), "p_s": float(ps),
                    "T_k": int(tk), "sigma_sq": float(s2),
                }
                for cid, size, b, v, pu, ps, tk, s2 in zip(
                    self.client_ids, self.dataset_sizes, self.budgets, self.noise_coefficients,
                    self.unbiased, self.probabilities, self.counts, self.sigma_sq)
            ],
        }


def _bounds_for(cfg, problem, probabilities, constants: dict | None):
    if constants is None:
        return None
    T = cfg.training.global_rounds * cfg.training.local_rounds
    inputs = BoundInputs(clip_C=cfg.training.clip, model_dimension_D=problem.model_dimension,
                         total_iterations_T=T,
                         **{k: v for k, v in constants.items() if k not in ("clip_C", "model_dimension_D")})
    terms = ErrorTerms(
        g_select_clip=g_select_clip(probabilities, problem.unbiased, inputs.clipping_gap_estimate,
                                    inputs.dissimilarity_B2, inputs.clip_C),
        g_dp=g_dp(probabilities, problem.noise_coefficients, problem.model_dimension),
    )
    out = {"theorem2_bound": theorem2_bound(inputs, terms)}
    try:
        out["theorem1_bound"] = theorem1_bound(inputs, terms)
    except DomainError as exc:
        out["theorem1_bound"] = None
        out["theorem1_skipped"] = str(exc)
    return out


def run_experiment(cfg: FederationConfig, policy: str | None = None, seed: int | None = None,
                   *, bound_constants: dict | None = None, setup: ExperimentSetup | None = None) -> ExperimentResult:
    policy = cfg.selection.policy if policy is None else policy
    seed = cfg.seed if seed is None else seed
    cfg.validate([policy])
    setup = build_setup(cfg, seed) if setup is None else setup
    problem, probs, fed_policy = selection_for(policy, cfg, setup)
    fed: FederationResult = run_federation(
        setup.architecture, setup.clients, training_params(cfg), probs, setup.eval_set, seed, policy=fed_policy,
    )
    last = fed.records[-1]
    p = probs.probabilities
    result = ExperimentResult(
        config_hash=cfg.config_hash(),
        policy=policy,
        seed=seed,
        records=fed.records,
        final={"eval_accuracy": last.eval_accuracy, "eval_loss": last.eval_loss,
               "train_loss": last.global_train_loss},
        probabilities=p,
        unbiased=problem.unbiased.probabilities,
        client_ids=[c.id for c in setup.clients],
        dataset_sizes=[c.size for c in setup.clients],
        budgets=[c.budget for c in setup.clients],
        noise_coefficients=problem.noise_coefficients,
        counts=fed.counts,
        sigma_sq=fed.sigma_sq,
        objective=objective_value(problem, p),
        kkt_residual=kkt_check(problem, p, kink_tol=1e-12).stationarity_residual,
        model_dimension=problem.model_dimension,
        bounds=_bounds_for(cfg, problem, p, bound_constants),
    )
    audit_sigma(result, setup, cfg)
    return result


def audit_sigma(result: ExperimentResult, setup: ExperimentSetup, cfg: FederationConfig) -> None:
    """Recompute every sigma_k^2 from the recorded T_k; any mismatch is an error."""
    for c, tk, s2 in zip(setup.clients, result.counts, result.sigma_sq):
        expected = (per_client_sigma_squared(c.profile(), int(tk), cfg.training.local_rounds, cfg.training.clip)
                    if cfg.training.dp_noise else 0.0)
        if s2 != expected:
            raise ConsistencyError(f"client {c.id}: sigma^2 {s2!r} != recomputed {expected!r} for T_k={tk}")


def _fmt(x: float) -> str:
    return repr(float(x))


def rounds_csv(records) -> str:
    lines = [",".join(ROUNDS_HEADER)]
    for r in records:
        ids = ";".join(str(i) for i in r.selected)
        lines.append(",".join([str(r.round), _fmt(r.global_train_loss), _fmt(r.eval_loss),
                               _fmt(r.eval_accuracy), _fmt(r.mean_noise_norm), ids]))
    return "\n".join(lines) + "\n"


def write_atomic(path, text: str) -> None:
    """Write ``text`` (UTF-8, LF) to a temporary sibling and rename it into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(text.encode("utf-8"))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


@dataclass(frozen=True)
class RunOutcome:
    value: object
    policy: str
    seed: int
    accuracy: float
    eval_loss: float
    status: str


def _one_run(args) -> RunOutcome:
    cfg, value, policy, seed = args
    try:
        res = run_experiment(cfg, policy, seed)
    except (DomainError, ConvergenceError, ConsistencyError) as exc:
        return RunOutcome(value, policy, seed, math.nan, math.nan, f"failed: {exc}")
    return RunOutcome(value, policy, seed, res.final["eval_accuracy"], res.final["eval_loss"], "ok")


def _execute(jobs, workers: int):
    if workers <= 1:
        return [_one_run(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_one_run, jobs))  # map keeps job order


def compare_policies(cfg: FederationConfig, policies=None, seeds=None, *, workers: int = 1) -> list:
    """One run per (policy, seed); outcomes in (seed, policy) order."""
    policies = tuple(cfg.selection.compare if policies is None else policies)
    seeds = tuple(cfg.seeds if seeds is None else seeds)
    cfg.validate(policies)
    return _execute([(cfg, None, p, s) for s in seeds for p in policies], workers)


def run_sweep(cfg: FederationConfig, parameter: str, values, policies=None, seeds=None, *,
              workers: int = 1) -> list:
    """Vary one parameter; failed runs are reported in the outcome status."""
    if parameter not in SWEEP_PARAMETERS:
        raise DomainError(f"sweep parameter must be one of {sorted(SWEEP_PARAMETERS)}, got {parameter!r}")
    values = list(values)
    if not values:
        raise DomainError("sweep needs at least one value")
    path, kind = SWEEP_PARAMETERS[parameter]
    policies = tuple(cfg.selection.compare if policies is None else policies)
    seeds = tuple(cfg.seeds if seeds is None else seeds)
    jobs = []
    for raw in values:
        try:
            value = kind(raw)
            variant = cfg.replace(**{path: value}).validate(policies)
        except (DomainError, ValueError) as exc:
            jobs.append((None, raw, str(exc)))
            continue
        jobs.extend(((variant, value, p, s), None, None) for p in policies for s in seeds)
    runnable = [j for j, _, _ in jobs if j is not None]
    done = iter(_execute(runnable, workers))
    out = []
    for job, raw, error in jobs:
        if job is None:
            out.extend(RunOutcome(raw, p, s, math.nan, math.nan, f"failed: {error}")
                       for p in policies for s in seeds)
        else:
            out.append(next(done))
    return out


def sweep_csv(parameter: str, outcomes) -> str:
    lines = [",".join(SWEEP_HEADER)]
    for o in outcomes:
        status = o.status.replace(",", ";").replace("\n", " ")
        lines.append(",".join([parameter, str(o.value), o.policy, str(o.seed), _fmt(o.accuracy),
                               _fmt(o.eval_loss), status]))
    return "\n".join(lines) + "\n"


def plot_rows(outcomes) -> list:
    """(x, policy, mean, stddev) over successful seeds, in first-seen order."""
    groups: dict = {}
    for o in outcomes:
        groups.setdefault((str(o.value), o.policy), []).append(o.accuracy)
    rows = []
    for (x, policy), accs in groups.items():
        a = np.array([v for v in accs if not math.isnan(v)])
        mean = float(a.mean()) if a.size else math.nan
        std = float(a.std(ddof=1)) if a.size > 1 else 0.0 if a.size else math.nan
        rows.append((x, policy, mean, std))
    return rows


def plot_csv(outcomes) -> str:
    lines = [",".join(PLOT_HEADER)]
    lines += [f"{x},{policy},{_fmt(m)},{_fmt(s)}" for x, policy, m, s in plot_rows(outcomes)]
    return "\n".join(lines) + "\n"


def summary_json(result: ExperimentResult) -> str:
    return json.dumps(result.summary(), indent=2, sort_keys=True) + "\n"
