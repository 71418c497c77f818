"""Client datasets: sizes, non-IID partitions, synthetic blobs, IDX files, budgets."""

from __future__ import annotations

import gzip
import math
import re
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .accounting import PrivacyBudget
from .errors import ConsistencyError, DomainError, ParseError

__all__ = [
    "Partition",
    "LabeledData",
    "sample_sizes",
    "partition_noniid",
    "synth_blobs",
    "load_idx",
    "parse_budget_spec",
    "sample_budgets",
    "DEFAULT_DELTA",
]

DEFAULT_DELTA = 1e-5
IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(frozen=True, eq=False)
class LabeledData:
    features: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "LabeledData":
        return LabeledData(self.features[idx], self.labels[idx])


@dataclass(frozen=True, eq=False)
class Partition:
    indices: list
    similarity: float
    size_weights: np.ndarray | None = None

    @property
    def sizes(self) -> list:
        return [len(ix) for ix in self.indices]


def _largest_remainder(shares: np.ndarray, total: int) -> np.ndarray:
    base = np.floor(shares).astype(int)
    short = total - base.sum()
    # ties go to the lowest index
    order = np.lexsort((np.arange(shares.size), -(shares - base)))
    base[order[:short]] += 1
    return base


def sample_sizes(total: int, num_clients: int, seed, *, return_weights: bool = False):
    """|M_k| = total * v_k / sum(v) with v_k ~ U(0.5, 1.5), rounded to integers.

    Rounding is by largest remainder so the sizes add up to ``total``; any
    client rounded down to zero takes one example from the largest client.
    """
    if num_clients < 1 or total < num_clients:
        raise DomainError(f"cannot split {total} examples over {num_clients} clients")
    rng = np.random.default_rng(seed)
    v = rng.uniform(0.5, 1.5, size=num_clients)
    sizes = _largest_remainder(total * v / v.sum(), total)
    while sizes.min() < 1:
        sizes[np.argmax(sizes)] -= 1
        sizes[np.argmin(sizes)] += 1
    return (sizes, v) if return_weights else sizes


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def partition_noniid(labels, sizes, similarity_s: float, seed) -> Partition:
    """Give every client ``round(s% * size)`` IID examples, then the rest as a
    contiguous run of the label-sorted leftovers.

    All IID draws happen first (client order), then the sorted pool is handed
    out in client order. Sorting is stable, so examples keep their original
    order within a class.
    """
    labels = np.asarray(labels)
    sizes = [int(s) for s in sizes]
    if not 0 <= similarity_s <= 100:
        raise DomainError(f"similarity must be in [0, 100], got {similarity_s!r}")
    if any(s < 0 for s in sizes):
        raise DomainError("client sizes must be non-negative")
    if sum(sizes) > labels.size:
        raise DomainError(f"{sum(sizes)} examples requested but only {labels.size} available")
    rng = np.random.default_rng(seed)
    free = np.ones(labels.size, dtype=bool)
    iid_parts = []
    for size in sizes:
        m = min(_round_half_up(similarity_s / 100.0 * size), size)
        pick = rng.choice(np.flatnonzero(free), size=m, replace=False)
        free[pick] = False
        iid_parts.append(np.sort(pick))
    pool = np.argsort(labels, kind="stable")
    pool = pool[free[pool]]
    out, cursor = [], 0
    for size, iid in zip(sizes, iid_parts):
        rest = size - iid.size
        out.append(np.concatenate([iid, pool[cursor:cursor + rest]]))
        cursor += rest
    return Partition(indices=out, similarity=float(similarity_s))


def synth_blobs(num_classes: int, dim: int, count: int, spread: float, seed) -> LabeledData:
    """Isotropic Gaussian clusters, one per class, with pairwise mean distance 1.

    Means sit on scaled orthonormal directions when ``dim >= num_classes``;
    otherwise on random points rescaled to unit minimum separation.
    Labels cycle through the classes so every class is equally represented.
    """
    if count < 1 or num_classes < 1 or dim < 1:
        raise DomainError("num_classes, dim and count must be >= 1")
    if not spread > 0:
        raise DomainError("spread must be > 0")
    rng = np.random.default_rng(seed)
    if dim >= num_classes:
        q, _ = np.linalg.qr(rng.standard_normal((dim, num_classes)))
        means = q.T / math.sqrt(2.0)
    else:
        means = rng.standard_normal((num_classes, dim))
        if num_classes > 1:
            gaps = np.linalg.norm(means[:, None] - means[None], axis=2)
            means /= gaps[np.triu_indices(num_classes, 1)].min()
    labels = np.arange(count) % num_classes
    rng.shuffle(labels)
    feats = means[labels] + spread * rng.standard_normal((count, dim))
    return LabeledData(feats, labels.astype(np.int64))


def _open(path):
    path = Path(path)
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def load_idx(images_path, labels_path) -> LabeledData:
    """Read an IDX image/label pair (optionally gzipped); pixels scaled to [0, 1]."""
    with _open(images_path) as fh:
        raw = fh.read()
    if len(raw) < 16:
        raise ParseError("truncated image header", offset=len(raw))
    magic, n, rows, cols = struct.unpack(">IIII", raw[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise ParseError(f"bad image magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}", offset=0)
    need = 16 + n * rows * cols
    if len(raw) < need:
        raise ParseError(f"image data truncated: need {need} bytes, have {len(raw)}", offset=len(raw))
    pixels = np.frombuffer(raw, dtype=np.uint8, count=n * rows * cols, offset=16)

    with _open(labels_path) as fh:
        lraw = fh.read()
    if len(lraw) < 8:
        raise ParseError("truncated label header", offset=len(lraw))
    lmagic, ln = struct.unpack(">II", lraw[:8])
    if lmagic != IDX_LABELS_MAGIC:
        raise ParseError(f"bad label magic 0x{lmagic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}", offset=0)
    if len(lraw) < 8 + ln:
        raise ParseError(f"label data truncated: need {8 + ln} bytes, have {len(lraw)}", offset=len(lraw))
    if ln != n:
        raise ConsistencyError(f"{n} images but {ln} labels")
    labels = np.frombuffer(lraw, dtype=np.uint8, count=ln, offset=8).astype(np.int64)
    return LabeledData(pixels.reshape(n, rows * cols).astype(float) / 255.0, labels)


_SPEC = re.compile(r"^\s*(uniform|mixture)\s*\(([^)]*)\)\s*$")


def parse_budget_spec(spec: str) -> tuple:
    """``uniform(a,b)`` or ``mixture(w1,m1,v1,w2,m2,v2)``; v are variances."""
    m = _SPEC.match(spec) if isinstance(spec, str) else None
    if not m:
        raise DomainError(f"bad budget spec {spec!r}")
    try:
        args = tuple(float(x) for x in m.group(2).split(","))
    except ValueError:
        raise DomainError(f"bad numbers in budget spec {spec!r}") from None
    kind = m.group(1)
    if kind == "uniform":
        if len(args) != 2 or not args[0] < args[1] or args[1] <= 0:
            raise DomainError(f"uniform needs a < b with b > 0, got {args}")
    else:
        if len(args) != 6:
            raise DomainError(f"mixture needs 6 numbers, got {len(args)}")
        w1, _, v1, w2, _, v2 = args
        if w1 < 0 or w2 < 0 or not math.isclose(w1 + w2, 1.0) or v1 < 0 or v2 < 0:
            raise DomainError(f"mixture weights must be >= 0 and sum to 1, variances >= 0: {args}")
    return (kind, *args)


def sample_budgets(num_clients: int, spec: str, seed, delta: float = DEFAULT_DELTA) -> list:
    """Draw epsilon per client, discarding non-positive draws; delta is fixed."""
    kind, *args = parse_budget_spec(spec)
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < num_clients:
        if kind == "uniform":
            eps = rng.uniform(args[0], args[1])
        else:
            w1, m1, v1, _, m2, v2 = args
            if rng.random() < w1:
                eps = rng.normal(m1, math.sqrt(v1))
            else:
                eps = rng.normal(m2, math.sqrt(v2))
        if eps > 0:
            out.append(PrivacyBudget(float(eps), delta))
    return out
