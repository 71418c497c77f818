"""Experiment configuration: a TOML file with four sections.

Grammar (all keys optional unless noted; unknown keys are rejected)::

    seed = 0                      # master seed, >= 0
    seeds = [0, 1, 2, 3, 4]       # seed list for compare / sweep statistics
    output_dir = "out"

    [clients]
    manifest = "clients.csv"      # use a manifest, or generate with the keys below
    num_clients = 50
    total_examples = 40000
    eval_examples = 2000
    num_classes = 10
    feature_dim = 32
    spread = 0.3
    similarity = 30.0             # s in [0, 100]
    budget_spec = "mixture(0.3,0.5,0.04,0.7,10,1)"
    delta = 1e-5

    [model]
    architecture = "logistic_regression"   # quadratic | logistic_regression | mlp_1hidden
    hidden = 32

    [training]
    global_rounds = 200
    local_rounds = 2
    per_round = 10
    batch_size = 128
    clip = 1.0
    schedule = "constant"          # constant | decaying | sqrt
    lr = 0.5
    beta = 1.0
    gamma = 1.0
    B1 = 1.0
    dp_noise = true
    aggregation = "sampled"        # sampled | expected
    apply_server_stepsize = false
    candidates = 20                # biased_loss candidate pool per round

    [selection]
    policy = "privacy_aware"       # privacy_aware | unbiased | biased_loss
    compare = ["privacy_aware", "unbiased", "biased_loss"]
    eta = 1000.0                   # required whenever privacy_aware is run

With a manifest, client sizes, budgets and subsampling ratios come from the
file and ``batch_size`` is ignored (each client uses round(r * size)).

``PRIVAWARE_SEED`` and ``PRIVAWARE_OUTPUT_DIR`` override ``seed`` and
``output_dir``; no other field can be set from the environment.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from .data import DEFAULT_DELTA, parse_budget_spec
from .errors import DomainError, ParseError
from .federation import AGGREGATIONS, SCHEDULES
from .models import ARCHITECTURES

__all__ = [
    "ClientsSpec",
    "ModelSpec",
    "TrainingSpec",
    "SelectionSpec",
    "FederationConfig",
    "POLICY_NAMES",
    "load_config",
    "config_from_dict",
    "ENV_SEED",
    "ENV_OUTPUT_DIR",
]

POLICY_NAMES = ("privacy_aware", "unbiased", "biased_loss")
ENV_SEED = "PRIVAWARE_SEED"
ENV_OUTPUT_DIR = "PRIVAWARE_OUTPUT_DIR"
CASE1_MIXTURE = "mixture(0.3,0.5,0.04,0.7,10,1)"


def _fail(name: str, message: str):
    raise DomainError(f"{name}: {message}")


@dataclass(frozen=True)
class ClientsSpec:
    manifest: str | None = None
    num_clients: int = 50
    total_examples: int = 40_000
    eval_examples: int = 2_000
    num_classes: int = 10
    feature_dim: int = 32
    spread: float = 0.3
    similarity: float = 30.0
    budget_spec: str = CASE1_MIXTURE
    delta: float = DEFAULT_DELTA

    def validate(self):
        for name in ("num_clients", "eval_examples", "num_classes", "feature_dim"):
            if getattr(self, name) < 1:
                _fail(f"clients.{name}", "must be >= 1")
        if self.manifest is None and self.total_examples < self.num_clients:
            _fail("clients.total_examples", "must be >= num_clients")
        if not self.spread > 0:
            _fail("clients.spread", "must be > 0")
        if not 0 <= self.similarity <= 100:
            _fail("clients.similarity", "must be in [0, 100]")
        if not 0 < self.delta < 1:
            _fail("clients.delta", "must be in (0, 1)")
        try:
            parse_budget_spec(self.budget_spec)
        except DomainError as exc:
            _fail("clients.budget_spec", str(exc))


@dataclass(frozen=True)
class ModelSpec:
    architecture: str = "logistic_regression"
    hidden: int = 32

    def validate(self):
        if self.architecture not in ARCHITECTURES:
            _fail("model.architecture", f"must be one of {sorted(ARCHITECTURES)}")
        if self.hidden < 1:
            _fail("model.hidden", "must be >= 1")


@dataclass(frozen=True)
class TrainingSpec:
    global_rounds: int = 200
    local_rounds: int = 2
    per_round: int = 10
    batch_size: int = 128
    clip: float = 1.0
    schedule: str = "constant"
    lr: float = 0.5
    beta: float = 1.0
    gamma: float = 1.0
    B1: float = 1.0
    dp_noise: bool = True
    aggregation: str = "sampled"
    apply_server_stepsize: bool = False
    candidates: int = 20

    def validate(self):
        for name in ("global_rounds", "local_rounds", "per_round", "batch_size", "candidates"):
            if getattr(self, name) < 1:
                _fail(f"training.{name}", "must be >= 1")
        for name in ("clip", "lr", "beta", "B1"):
            if not getattr(self, name) > 0:
                _fail(f"training.{name}", "must be > 0")
        if self.schedule not in SCHEDULES:
            _fail("training.schedule", f"must be one of {SCHEDULES}")
        if self.schedule == "decaying" and self.gamma < 1:
            _fail("training.gamma", "must be >= 1 for the decaying schedule")
        if self.aggregation not in AGGREGATIONS:
            _fail("training.aggregation", f"must be one of {AGGREGATIONS}")


@dataclass(frozen=True)
class SelectionSpec:
    policy: str = "privacy_aware"
    compare: tuple = POLICY_NAMES
    eta: float | None = None

    def validate(self):
        if self.policy not in POLICY_NAMES:
            _fail("selection.policy", f"must be one of {POLICY_NAMES}")
        if not self.compare or any(p not in POLICY_NAMES for p in self.compare):
            _fail("selection.compare", f"must be a non-empty list drawn from {POLICY_NAMES}")
        if len(set(self.compare)) != len(self.compare):
            _fail("selection.compare", "lists a policy twice")
        if self.eta is not None and not self.eta >= 0:
            _fail("selection.eta", "must be >= 0")


@dataclass(frozen=True)
class FederationConfig:
    clients: ClientsSpec = field(default_factory=ClientsSpec)
    model: ModelSpec = field(default_factory=ModelSpec)
    training: TrainingSpec = field(default_factory=TrainingSpec)
    selection: SelectionSpec = field(default_factory=SelectionSpec)
    seed: int = 0
    seeds: tuple = (0, 1, 2, 3, 4)
    output_dir: str = "out"

    def validate(self, policies=None) -> "FederationConfig":
        """Check every field; ``policies`` are the ones about to run."""
        self.clients.validate()
        self.model.validate()
        self.training.validate()
        self.selection.validate()
        if self.seed < 0:
            _fail("seed", "must be >= 0")
        if not self.seeds or any(s < 0 for s in self.seeds):
            _fail("seeds", "must be a non-empty list of seeds >= 0")
        if self.clients.manifest is None and self.training.per_round > self.clients.num_clients * 1000:
            _fail("training.per_round", "is implausibly large")
        policies = (self.selection.policy,) if policies is None else tuple(policies)
        if "privacy_aware" in policies and self.selection.eta is None:
            _fail("selection.eta", "is required for the privacy_aware policy")
        if "biased_loss" in policies:
            if self.training.aggregation != "sampled":
                _fail("training.aggregation", "must be 'sampled' for the biased_loss policy")
            if self.training.candidates < self.training.per_round:
                _fail("training.candidates", "must be >= per_round for the biased_loss policy")
        return self

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["seeds"] = list(self.seeds)
        d["selection"]["compare"] = list(self.selection.compare)
        return d

    def config_hash(self) -> str:
        """SHA-256 of the canonical JSON form; ``output_dir`` does not count."""
        d = self.to_dict()
        d.pop("output_dir")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"), allow_nan=False)
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def replace(self, **changes) -> "FederationConfig":
        """Copy with dotted-path changes, e.g. ``replace(**{"training.batch_size": 64})``."""
        d = self.to_dict()
        for path, value in changes.items():
            node = d
            *parents, leaf = path.split(".")
            for p in parents:
                node = node[p]
            if leaf not in node:
                raise DomainError(f"{path}: unknown field")
            node[leaf] = value
        return config_from_dict(d)


_SECTIONS = {
    "clients": ClientsSpec,
    "model": ModelSpec,
    "training": TrainingSpec,
    "selection": SelectionSpec,
}
_TOP = {"seed": int, "seeds": list, "output_dir": str}


def _coerce(name: str, value, default):
    """Light type checks so that, say, a string clip fails with the field name."""
    if isinstance(default, bool):
        if not isinstance(value, bool):
            _fail(name, f"expected true/false, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            _fail(name, f"expected an integer, got {value!r}")
        return value
    if isinstance(default, float) or (default is None and name.endswith("eta")):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            _fail(name, f"expected a number, got {value!r}")
        return float(value)
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            _fail(name, f"expected a list, got {value!r}")
        return tuple(value)
    if isinstance(default, str) or (default is None and name.endswith("manifest")):
        if not isinstance(value, str):
            _fail(name, f"expected a string, got {value!r}")
        return value
    return value


def config_from_dict(raw: dict) -> FederationConfig:
    kwargs = {}
    for key, value in raw.items():
        if key in _SECTIONS:
            if not isinstance(value, dict):
                _fail(key, "must be a table")
            cls = _SECTIONS[key]
            defaults = {f.name: (f.default if f.default is not dataclasses.MISSING else None)
                        for f in dataclasses.fields(cls)}
            section = {}
            for k, v in value.items():
                if k not in defaults:
                    _fail(f"{key}.{k}", "unknown field")
                section[k] = v if v is None else _coerce(f"{key}.{k}", v, defaults[k])
            kwargs[key] = cls(**section)
        elif key in _TOP:
            if key == "seed":
                kwargs[key] = _coerce("seed", value, 0)
            elif key == "seeds":
                if not isinstance(value, (list, tuple)) or not all(
                        isinstance(s, int) and not isinstance(s, bool) for s in value):
                    _fail("seeds", "expected a list of integers")
                kwargs[key] = tuple(value)
            else:
                kwargs[key] = _coerce("output_dir", value, "")
        else:
            _fail(key, "unknown field")
    return FederationConfig(**kwargs)


def load_config(path, *, environ=None, policies=None, validate=True) -> FederationConfig:
    """Parse ``path``, apply the seed/output-dir environment overrides and validate."""
    environ = os.environ if environ is None else environ
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except OSError as exc:
        raise ParseError(f"cannot read config {path}: {exc.strerror}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ParseError(f"config {path}: {exc}") from None
    if ENV_SEED in environ:
        try:
            raw["seed"] = int(environ[ENV_SEED])
        except ValueError:
            _fail("seed", f"{ENV_SEED}={environ[ENV_SEED]!r} is not an integer")
    if ENV_OUTPUT_DIR in environ:
        raw["output_dir"] = environ[ENV_OUTPUT_DIR]
    cfg = config_from_dict(raw)
    manifest = cfg.clients.manifest
    if manifest is not None and not Path(manifest).is_absolute():
        cfg = cfg.replace(**{"clients.manifest": str(Path(path).parent / manifest)})
    return cfg.validate(policies) if validate else cfg
