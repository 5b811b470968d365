"""Self-describing binary container: a JSON header plus named float64
little-endian arrays, integrity-checked by a trailing SHA-256 digest.

Layout (all integers little-endian):

    bytes 0..7    magic  b"MILK0001"
    bytes 8..15   uint64 header length in bytes
    header        UTF-8 JSON: {"meta": {...},
                               "arrays": {name: {"offset": int, "shape": [...]}},
                               "payload_bytes": int}
    payload       named arrays, float64 LE, back-to-back at their offsets
    digest        SHA-256 over every preceding byte

Writing the same content twice produces identical bytes (keys are sorted and
the JSON form is canonical), so files can be compared for reproducibility.
"""

from __future__ import annotations

import hashlib
import json

import numpy as np

__all__ = ["write_blob", "read_blob", "FormatError", "ChecksumError", "MAGIC"]

MAGIC = b"MILK0001"


class FormatError(ValueError):
    """File is not a recognizable container of a supported version."""


class ChecksumError(FormatError):
    """Stored digest disagrees with the file contents (truncation/corruption)."""


def write_blob(path, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    names = sorted(arrays)
    index = {}
    offset = 0
    chunks = []
    for name in names:
        a = np.ascontiguousarray(np.asarray(arrays[name], dtype="<f8"))
        index[name] = {"offset": offset, "shape": list(a.shape)}
        chunk = a.tobytes()
        chunks.append(chunk)
        offset += len(chunk)
    header = json.dumps({"meta": meta, "arrays": index, "payload_bytes": offset},
                        sort_keys=True, separators=(",", ":")).encode("utf-8")
    digest = hashlib.sha256()
    with open(path, "wb") as fh:
        for part in (MAGIC, len(header).to_bytes(8, "little"), header, *chunks):
            digest.update(part)
            fh.write(part)
        fh.write(digest.digest())


def read_blob(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < len(MAGIC) + 8 + 32 or raw[:len(MAGIC)] != MAGIC:
        raise FormatError(f"{path}: not a {MAGIC.decode()} container")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise ChecksumError(f"{path}: checksum mismatch (truncated or corrupted)")
    hlen = int.from_bytes(raw[8:16], "little")
    try:
        header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: bad header ({e})") from None
    payload = raw[16 + hlen:-32]
    if len(payload) != header["payload_bytes"]:
        raise FormatError(f"{path}: payload length mismatch")
    arrays = {}
    for name, entry in header["arrays"].items():
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=start)
        arrays[name] = arr.reshape(shape).astype(np.float64)
    return header["meta"], arrays
