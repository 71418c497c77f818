"""Small models with exact, vectorised per-example gradients.

Every architecture is stateless; parameters live in a flat float64 vector so
clipping, noise and aggregation act on plain arrays. Per-example gradients
come back as a ``(batch, D)`` matrix.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DomainError, ParseError

__all__ = [
    "Architecture",
    "Quadratic",
    "LogisticRegression",
    "MLP",
    "Model",
    "make_architecture",
    "per_example_gradient",
    "save_checkpoint",
    "load_checkpoint",
]


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _log_softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


class Architecture:
    tag: str = ""
    dimension: int = 0
    has_accuracy = True

    def header(self) -> dict:
        raise NotImplementedError

    def init(self, rng: np.random.Generator) -> np.ndarray:
        return np.zeros(self.dimension)

    def losses(self, w, X, y) -> np.ndarray:
        raise NotImplementedError

    def per_example_gradients(self, w, X, y) -> np.ndarray:
        raise NotImplementedError

    def predict(self, w, X) -> np.ndarray:
        raise NotImplementedError

    def accuracy(self, w, X, y) -> float:
        if not self.has_accuracy or len(y) == 0:
            return 0.0
        return float(np.mean(self.predict(w, X) == y))

    def _check(self, w, X):
        if w.shape != (self.dimension,):
            raise DomainError(f"{self.tag} expects {self.dimension} parameters, got {w.shape}")
        if X.ndim != 2 or X.shape[1] != self.num_features:
            raise DomainError(f"{self.tag} expects {self.num_features} features, got {X.shape}")


class Quadratic(Architecture):
    """Loss 0.5 * |w - x|^2; labels are ignored.

    Gradients are 1-Lipschitz and the loss 1-strongly convex, so L = mu = 1.
    Accuracy is not defined and reported as 0.
    """

    tag = "quadratic"
    has_accuracy = False

    def __init__(self, num_features: int):
        self.num_features = self.dimension = int(num_features)

    def header(self):
        return {"num_features": self.num_features}

    def losses(self, w, X, y=None):
        self._check(w, X)
        return 0.5 * np.sum((w - X) ** 2, axis=1)

    def per_example_gradients(self, w, X, y=None):
        self._check(w, X)
        return w - X

    def predict(self, w, X):
        return np.zeros(len(X), dtype=int)


class LogisticRegression(Architecture):
    """Multinomial logistic regression, parameters ``[W.ravel(), b]``."""

    tag = "logistic_regression"

    def __init__(self, num_features: int, num_classes: int):
        self.num_features = int(num_features)
        self.num_classes = int(num_classes)
        self.dimension = self.num_classes * (self.num_features + 1)

    def header(self):
        return {"num_features": self.num_features, "num_classes": self.num_classes}

    def _unpack(self, w):
        k, d = self.num_classes, self.num_features
        return w[: k * d].reshape(k, d), w[k * d:]

    def _logits(self, w, X):
        W, b = self._unpack(w)
        return X @ W.T + b

    def losses(self, w, X, y):
        self._check(w, X)
        return -_log_softmax(self._logits(w, X))[np.arange(len(y)), y]

    def per_example_gradients(self, w, X, y):
        self._check(w, X)
        err = _softmax(self._logits(w, X))
        err[np.arange(len(y)), y] -= 1.0
        gW = err[:, :, None] * X[:, None, :]
        return np.concatenate([gW.reshape(len(X), -1), err], axis=1)

    def predict(self, w, X):
        return np.argmax(self._logits(w, X), axis=1)


class MLP(Architecture):
    """One tanh hidden layer and a softmax output.

    Parameters are ``[W1.ravel(), b1, W2.ravel(), b2]`` with W1 of shape
    (hidden, features) and W2 of shape (classes, hidden).
    """

    tag = "mlp_1hidden"

    def __init__(self, num_features: int, hidden: int, num_classes: int):
        self.num_features = int(num_features)
        self.hidden = int(hidden)
        self.num_classes = int(num_classes)
        h, d, k = self.hidden, self.num_features, self.num_classes
        self.dimension = h * d + h + k * h + k

    def header(self):
        return {"num_features": self.num_features, "hidden": self.hidden, "num_classes": self.num_classes}

    def init(self, rng):
        h, d, k = self.hidden, self.num_features, self.num_classes
        W1 = rng.normal(0.0, 1.0 / np.sqrt(d), size=(h, d))
        W2 = rng.normal(0.0, 1.0 / np.sqrt(h), size=(k, h))
        return np.concatenate([W1.ravel(), np.zeros(h), W2.ravel(), np.zeros(k)])

    def _unpack(self, w):
        h, d, k = self.hidden, self.num_features, self.num_classes
        i = 0
        W1 = w[i:i + h * d].reshape(h, d); i += h * d
        b1 = w[i:i + h]; i += h
        W2 = w[i:i + k * h].reshape(k, h); i += k * h
        b2 = w[i:i + k]
        return W1, b1, W2, b2

    def _forward(self, w, X):
        W1, b1, W2, b2 = self._unpack(w)
        a = np.tanh(X @ W1.T + b1)
        return a, a @ W2.T + b2

    def losses(self, w, X, y):
        self._check(w, X)
        _, z = self._forward(w, X)
        return -_log_softmax(z)[np.arange(len(y)), y]

    def per_example_gradients(self, w, X, y):
        self._check(w, X)
        W1, _, W2, _ = self._unpack(w)
        a, z = self._forward(w, X)
        dz = _softmax(z)
        dz[np.arange(len(y)), y] -= 1.0
        gW2 = dz[:, :, None] * a[:, None, :]
        dh = (dz @ W2) * (1.0 - a * a)
        gW1 = dh[:, :, None] * X[:, None, :]
        n = len(X)
        return np.concatenate([gW1.reshape(n, -1), dh, gW2.reshape(n, -1), dz], axis=1)

    def predict(self, w, X):
        return np.argmax(self._forward(w, X)[1], axis=1)


ARCHITECTURES = {cls.tag: cls for cls in (Quadratic, LogisticRegression, MLP)}


def make_architecture(tag: str, **header) -> Architecture:
    try:
        cls = ARCHITECTURES[tag]
    except KeyError:
        raise DomainError(f"unknown architecture {tag!r}; choose from {sorted(ARCHITECTURES)}") from None
    return cls(**header)


@dataclass
class Model:
    architecture: Architecture
    parameters: np.ndarray

    def __post_init__(self):
        self.parameters = np.asarray(self.parameters, dtype=float)
        if self.parameters.shape != (self.architecture.dimension,):
            raise DomainError(
                f"{self.architecture.tag} declares {self.architecture.dimension} parameters, "
                f"got {self.parameters.shape}"
            )


def per_example_gradient(model: Model, x, y=0) -> np.ndarray:
    """Gradient of the loss of one example at the model's parameters."""
    X = np.atleast_2d(np.asarray(x, dtype=float))
    Y = np.atleast_1d(np.asarray(y, dtype=int))
    return model.architecture.per_example_gradients(model.parameters, X, Y)[0]


# Checkpoint layout: one UTF-8 JSON header line terminated by "\n", then
# 8 bytes little-endian uint64 parameter count, then that many little-endian
# float64 values.
CHECKPOINT_FORMAT = "privaware-checkpoint"
CHECKPOINT_VERSION = 1


def save_checkpoint(model: Model, path) -> None:
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "architecture": model.architecture.tag,
        **model.architecture.header(),
    }
    blob = json.dumps(header, sort_keys=True).encode() + b"\n"
    blob += struct.pack("<Q", model.parameters.size)
    blob += model.parameters.astype("<f8").tobytes()
    Path(path).write_bytes(blob)


def load_checkpoint(path) -> Model:
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise ParseError("checkpoint header is not terminated", offset=0)
    try:
        header = json.loads(raw[:nl])
    except json.JSONDecodeError as exc:
        raise ParseError(f"bad checkpoint header: {exc.msg}", offset=exc.pos) from None
    if header.pop("format", None) != CHECKPOINT_FORMAT:
        raise ParseError("not a privaware checkpoint", offset=0)
    version = header.pop("version", None)
    if version != CHECKPOINT_VERSION:
        raise ParseError(f"unsupported checkpoint version {version!r}", offset=0)
    arch = make_architecture(header.pop("architecture"), **header)
    start = nl + 1
    if len(raw) < start + 8:
        raise ParseError("truncated checkpoint", offset=start)
    (count,) = struct.unpack("<Q", raw[start:start + 8])
    body = raw[start + 8:]
    if len(body) != 8 * count:
        raise ParseError(f"expected {count} float64 values, found {len(body) / 8:g}", offset=start + 8)
    return Model(arch, np.frombuffer(body, dtype="<f8").astype(float))
