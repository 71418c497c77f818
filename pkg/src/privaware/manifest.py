"""Client manifests: one CSV record per client.

Layout (UTF-8, LF line endings, no quoting)::

    id,dataset_size,epsilon,delta,subsampling_ratio
    0,120,0.5,1e-05,0.1

Floats are written with ``repr`` so a file produced by ``write_manifest``
reads back to the same values and rewrites to the same bytes.
"""

from __future__ import annotations

from pathlib import Path

from .accounting import ClientProfile, PrivacyBudget
from .errors import DomainError, ParseError

__all__ = ["MANIFEST_HEADER", "read_manifest", "write_manifest", "format_manifest", "parse_manifest"]

MANIFEST_HEADER = ("id", "dataset_size", "epsilon", "delta", "subsampling_ratio")


def format_manifest(profiles) -> str:
    lines = [",".join(MANIFEST_HEADER)]
    for p in profiles:
        lines.append(
            f"{p.id},{p.dataset_size},{p.budget.epsilon!r},{p.budget.delta!r},{p.subsampling_ratio!r}"
        )
    return "\n".join(lines) + "\n"


def write_manifest(profiles, path) -> None:
    Path(path).write_bytes(format_manifest(profiles).encode("utf-8"))


def _int(text: str, name: str, line: int) -> int:
    try:
        return int(text)
    except ValueError:
        raise ParseError(f"{name} {text!r} is not an integer", line=line) from None


def _float(text: str, name: str, line: int) -> float:
    try:
        return float(text)
    except ValueError:
        raise ParseError(f"{name} {text!r} is not a number", line=line) from None


def parse_manifest(text: str) -> list[ClientProfile]:
    """Parse manifest text; errors carry the 1-based line number."""
    if "\r" in text:
        line = text[: text.index("\r")].count("\n") + 1
        raise ParseError("carriage return found; manifests use LF line endings", line=line)
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines or tuple(lines[0].split(",")) != MANIFEST_HEADER:
        raise ParseError(f"header must be {','.join(MANIFEST_HEADER)}", line=1)
    profiles, seen = [], set()
    for number, raw in enumerate(lines[1:], start=2):
        fields = raw.split(",")
        if len(fields) != len(MANIFEST_HEADER):
            raise ParseError(f"expected {len(MANIFEST_HEADER)} fields, found {len(fields)}", line=number)
        cid = _int(fields[0], "id", number)
        size = _int(fields[1], "dataset_size", number)
        eps = _float(fields[2], "epsilon", number)
        delta = _float(fields[3], "delta", number)
        ratio = _float(fields[4], "subsampling_ratio", number)
        if cid in seen:
            raise ParseError(f"duplicate client id {cid}", line=number)
        seen.add(cid)
        try:
            profiles.append(ClientProfile(cid, size, PrivacyBudget(eps, delta), ratio))
        except DomainError as exc:
            raise DomainError(f"{exc} (line {number})") from None
    if not profiles:
        raise ParseError("manifest lists no clients", line=1)
    return profiles


def read_manifest(path) -> list[ClientProfile]:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise ParseError(f"cannot read manifest {path}: {exc.strerror}") from None
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ParseError(f"manifest is not UTF-8: {exc.reason}", offset=exc.start) from None
    return parse_manifest(text)
