"""DP-FedAvg: local DP-SGD on sampled clients, averaged by the server.

The schedule of participants is drawn before training so each client knows
how often it will be selected (T_k) and can calibrate its noise once. A client
drawn several times in one round runs as that many independent virtual
clients, each with its own data subsample and noise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .accounting import ClientProfile, PrivacyBudget, per_client_sigma_squared
from .errors import DomainError
from .models import Architecture, Model
from .seeding import derive_seed, stream
from .selection import SelectionProbabilities, biased_loss_selection, sample_schedule

__all__ = [
    "ClientData",
    "TrainingParams",
    "LocalUpdate",
    "RoundRecord",
    "FederationResult",
    "clip_gradient",
    "clip_rows",
    "stepsize_schedule",
    "client_update",
    "aggregate",
    "run_federation",
]

SCHEDULES = ("constant", "decaying", "sqrt")
AGGREGATIONS = ("sampled", "expected")
POLICIES = ("probabilistic", "biased_loss")


@dataclass(frozen=True, eq=False)
class ClientData:
    id: int
    features: np.ndarray
    labels: np.ndarray
    budget: PrivacyBudget
    batch_size: int

    def __post_init__(self):
        if len(self.features) != len(self.labels):
            raise DomainError(f"client {self.id}: {len(self.features)} features vs {len(self.labels)} labels")
        if not 1 <= self.batch_size <= len(self.labels):
            raise DomainError(
                f"client {self.id}: batch_size {self.batch_size} not in [1, {len(self.labels)}]"
            )

    @property
    def size(self) -> int:
        return len(self.labels)

    def profile(self) -> ClientProfile:
        return ClientProfile(self.id, self.size, self.budget, self.batch_size / self.size)


@dataclass(frozen=True)
class TrainingParams:
    global_rounds: int
    local_rounds: int
    per_round: int
    clip: float
    schedule: str = "constant"
    lr: float = 0.1
    beta: float = 1.0
    gamma: float = 1.0
    B1: float = 1.0
    dp_noise: bool = True
    aggregation: str = "sampled"
    apply_server_stepsize: bool = False
    candidates: int = 20
    debug: bool = False

    def __post_init__(self):
        for name in ("global_rounds", "local_rounds", "per_round"):
            if getattr(self, name) < 1:
                raise DomainError(f"{name} must be >= 1")
        if not self.clip > 0:
            raise DomainError("clip must be > 0")
        if self.schedule not in SCHEDULES:
            raise DomainError(f"schedule must be one of {SCHEDULES}, got {self.schedule!r}")
        if self.aggregation not in AGGREGATIONS:
            raise DomainError(f"aggregation must be one of {AGGREGATIONS}, got {self.aggregation!r}")
        if self.schedule == "decaying" and self.gamma < 1:
            raise DomainError("decaying schedule needs gamma >= 1")

    @property
    def total_iterations(self) -> int:
        return self.global_rounds * self.local_rounds


@dataclass(frozen=True, eq=False)
class LocalUpdate:
    client_id: int
    delta: np.ndarray
    noise_sigma_sq: float
    noise_norm: float = 0.0
    max_clipped_norm: float = 0.0


@dataclass(frozen=True)
class RoundRecord:
    round: int
    selected: tuple
    global_train_loss: float
    eval_loss: float
    eval_accuracy: float
    mean_noise_norm: float


@dataclass
class FederationResult:
    records: list
    model: Model
    counts: np.ndarray
    sigma_sq: np.ndarray
    max_clipped_norm: float = 0.0
    clipped_steps: int = 0
    extras: dict = field(default_factory=dict)


def clip_gradient(gradient, C: float) -> np.ndarray:
    """g / max(1, |g|_2 / C)."""
    g = np.asarray(gradient, dtype=float)
    return g / max(1.0, float(np.linalg.norm(g)) / C)


def clip_rows(G: np.ndarray, C: float) -> np.ndarray:
    norms = np.linalg.norm(G, axis=1)
    return G / np.maximum(1.0, norms / C)[:, None]


def stepsize_schedule(params: TrainingParams):
    """Stepsize as a function of the global iteration index t = t_g * T_l + t_l."""
    if params.schedule == "constant":
        return lambda t: params.lr
    if params.schedule == "decaying":
        return lambda t: params.beta / (params.gamma + t)
    step = params.B1 / params.clip / math.sqrt(params.total_iterations)
    return lambda t: step


def client_update(
    architecture: Architecture,
    weights: np.ndarray,
    client: ClientData,
    sigma_sq: float,
    local_rounds: int,
    batch_size: int,
    stepsizes,
    C: float,
    rng: np.random.Generator,
    *,
    debug: bool = False,
) -> LocalUpdate:
    """Run ``local_rounds`` noisy clipped SGD steps and return w_start - w_end."""
    if batch_size > client.size:
        raise DomainError(f"batch_size {batch_size} exceeds client {client.id}'s {client.size} examples")
    if len(stepsizes) != local_rounds:
        raise DomainError("need one stepsize per local round")
    w = np.array(weights, dtype=float)
    sigma = math.sqrt(sigma_sq)
    noise_total = np.zeros_like(w)
    max_norm = 0.0
    for t in range(local_rounds):
        idx = rng.choice(client.size, size=batch_size, replace=False)
        G = clip_rows(architecture.per_example_gradients(w, client.features[idx], client.labels[idx]), C)
        if debug:
            norms = np.linalg.norm(G, axis=1)
            max_norm = max(max_norm, float(norms.max()))
            assert np.all(norms <= C * (1 + 1e-12)), "clipped gradient exceeds C"
        step = G.mean(axis=0)
        if sigma > 0:
            noise = sigma * rng.standard_normal(w.size)
            step = step + noise
            noise_total += stepsizes[t] * noise
        w -= stepsizes[t] * step
    return LocalUpdate(
        client_id=client.id,
        delta=np.asarray(weights, dtype=float) - w,
        noise_sigma_sq=float(sigma_sq),
        noise_norm=float(np.linalg.norm(noise_total)),
        max_clipped_norm=max_norm,
    )


def aggregate(updates, stepsize: float = 1.0, weights=None) -> np.ndarray:
    """Combined delta to subtract from the global model.

    Uniform mean over updates (one per virtual client) unless ``weights`` are
    given; the sum runs in list order so results do not depend on scheduling.
    """
    if not updates:
        raise DomainError("cannot aggregate an empty list of updates")
    dim = updates[0].delta.size
    if any(u.delta.size != dim for u in updates):
        raise DomainError("updates have inconsistent dimensions")
    if weights is None:
        weights = np.full(len(updates), 1.0 / len(updates))
    total = np.zeros(dim)
    for wgt, u in zip(weights, updates):
        total += wgt * u.delta
    return stepsize * total


def _evaluate(arch, w, train_X, train_y, eval_X, eval_y):
    train_loss = float(arch.losses(w, train_X, train_y).mean())
    eval_loss = float(arch.losses(w, eval_X, eval_y).mean())
    return train_loss, eval_loss, arch.accuracy(w, eval_X, eval_y)


def run_federation(
    architecture: Architecture,
    clients,
    params: TrainingParams,
    probabilities,
    eval_set,
    seed: int,
    *,
    policy: str = "probabilistic",
    initial=None,
) -> FederationResult:
    """Train for ``params.global_rounds`` rounds and evaluate after each one.

    ``policy="probabilistic"`` samples participants from ``probabilities``.
    ``policy="biased_loss"`` draws ``params.candidates`` distinct clients per
    round in proportion to ``probabilities`` and keeps the ``per_round`` with
    the largest loss on a probe batch; noise is then calibrated on how often a
    client is a candidate, which bounds how often it can be picked.
    """
    clients = list(clients)
    n = len(clients)
    p = probabilities.probabilities if isinstance(probabilities, SelectionProbabilities) else np.asarray(probabilities, float)
    if p.shape != (n,):
        raise DomainError(f"{p.size} probabilities for {n} clients")
    if policy not in POLICIES:
        raise DomainError(f"policy must be one of {POLICIES}, got {policy!r}")
    if policy == "biased_loss":
        if params.aggregation != "sampled":
            raise DomainError("biased_loss selection requires sampled aggregation")
        if not params.per_round <= params.candidates <= np.count_nonzero(p):
            raise DomainError(f"need per_round <= candidates <= {np.count_nonzero(p)} reachable clients")

    T_g, T_l, C = params.global_rounds, params.local_rounds, params.clip
    lr = stepsize_schedule(params)

    # participants, fixed before training
    if params.aggregation == "expected":
        members = np.flatnonzero(p > 0)
        plan = [members for _ in range(T_g)]
        counts = np.where(p > 0, T_g, 0)
    elif policy == "biased_loss":
        srng = stream(seed, "candidates")
        plan = [np.sort(srng.choice(n, size=params.candidates, replace=False, p=p)) for _ in range(T_g)]
        counts = np.bincount(np.concatenate(plan), minlength=n)
    else:
        sched = sample_schedule(p, T_g, params.per_round, derive_seed(seed, "schedule"))
        plan = list(sched.slots)
        counts = sched.counts

    sigma_sq = np.zeros(n)
    if params.dp_noise:
        for k, c in enumerate(clients):
            sigma_sq[k] = per_client_sigma_squared(c.profile(), int(counts[k]), T_l, C)

    train_X = np.concatenate([c.features for c in clients])
    train_y = np.concatenate([c.labels for c in clients])
    eval_X, eval_y = eval_set
    w = architecture.init(stream(seed, "init")) if initial is None else np.array(initial, dtype=float)

    records = []
    max_norm, steps = 0.0, 0
    for tg in range(T_g):
        slots = plan[tg]
        if policy == "biased_loss":
            losses = []
            for k in slots:
                c = clients[k]
                prng = stream(seed, "probe", tg, int(k))
                idx = prng.choice(c.size, size=min(c.batch_size, c.size), replace=False)
                losses.append(float(architecture.losses(w, c.features[idx], c.labels[idx]).mean()))
            slots = slots[biased_loss_selection(losses, params.per_round)]
        steps_lr = [lr(tg * T_l + tl) for tl in range(T_l)]
        updates = []
        for slot, k in enumerate(slots):
            c = clients[int(k)]
            upd = client_update(
                architecture, w, c, sigma_sq[k], T_l, c.batch_size, steps_lr, C,
                stream(seed, "client", tg, slot, int(k)), debug=params.debug,
            )
            updates.append(upd)
            max_norm = max(max_norm, upd.max_clipped_norm)
            steps += T_l
        weights = p[slots] if params.aggregation == "expected" else None
        server_step = lr(tg * T_l) if params.apply_server_stepsize else 1.0
        w = w - aggregate(updates, server_step, weights)
        tr, ev, acc = _evaluate(architecture, w, train_X, train_y, eval_X, eval_y)
        records.append(RoundRecord(
            round=tg,
            selected=tuple(int(c) for c in slots),
            global_train_loss=tr,
            eval_loss=ev,
            eval_accuracy=acc,
            mean_noise_norm=float(np.mean([u.noise_norm for u in updates])),
        ))
    return FederationResult(
        records=records,
        model=Model(architecture, w),
        counts=np.asarray(counts),
        sigma_sq=sigma_sq,
        max_clipped_norm=max_norm,
        clipped_steps=steps,
    )
