"""Shared helpers: stable hashing, atomic file writes, JSONL I/O."""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from pathlib import Path
from typing import Any, Iterable

# Domain separator so hashes never collide with other sha256 uses.
_HASH_DOMAIN = b"difficulty-sampler/v1"

HashPart = str | bytes | int | float


def stable_hash_bytes(*parts: HashPart) -> bytes:
    """SHA-256 over a canonical, type-tagged, length-prefixed encoding of parts.

    The encoding is fixed (documented here, stable across releases): for each
    part, a one-byte type tag (s/b/i/f), an 8-byte big-endian payload length,
    then the payload bytes. Strings are UTF-8, ints are their decimal string,
    floats their shortest round-trip repr.
    """
    h = hashlib.sha256(_HASH_DOMAIN)
    for part in parts:
        if isinstance(part, str):
            tag, payload = b"s", part.encode("utf-8")
        elif isinstance(part, bytes):
            tag, payload = b"b", part
        elif isinstance(part, bool):
            raise TypeError("bool is not a supported hash part")
        elif isinstance(part, int):
            tag, payload = b"i", str(part).encode("ascii")
        elif isinstance(part, float):
            tag, payload = b"f", repr(part).encode("ascii")
        else:
            raise TypeError(f"unsupported hash part type: {type(part)!r}")
        h.update(tag)
        h.update(len(payload).to_bytes(8, "big"))
        h.update(payload)
    return h.digest()


def stable_hash(*parts: HashPart) -> int:
    """First 8 bytes of stable_hash_bytes as an unsigned 64-bit integer."""
    return int.from_bytes(stable_hash_bytes(*parts)[:8], "big")


def stable_hash_hex(*parts: HashPart) -> str:
    return stable_hash_bytes(*parts).hex()


def atomic_write_bytes(path: Path | str, data: bytes) -> None:
    """Write-then-rename so readers never observe a torn file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def atomic_write_text(path: Path | str, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def json_line(obj: Any) -> str:
    """Canonical single-line JSON used for all emitted JSONL records."""
    return json.dumps(obj, ensure_ascii=False, sort_keys=True, separators=(",", ":"))


def write_jsonl(path: Path | str, records: Iterable[Any]) -> None:
    atomic_write_text(path, "".join(json_line(r) + "\n" for r in records))


def read_jsonl(path: Path | str) -> list[Any]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                records.append(json.loads(line))
    return records


def read_jsonl_tolerant(path: Path | str) -> tuple[list[Any], bool]:
    """Read a possibly crash-truncated JSONL file.

    Returns (records, clean). A torn trailing line (no newline, or invalid
    JSON in the final line) is dropped and reported via clean=False; a torn
    or empty line anywhere else is a hard error.
    """
    raw = Path(path).read_bytes().decode("utf-8", errors="replace")
    if not raw:
        return [], True
    clean = raw.endswith("\n")
    lines = raw.split("\n")
    if clean:
        lines = lines[:-1]
    records: list[Any] = []
    for i, line in enumerate(lines):
        last = i == len(lines) - 1
        try:
            records.append(json.loads(line))
        except json.JSONDecodeError:
            if last:
                return records, False
            raise
    return records, clean


def sha256_file(path: Path | str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
