"""Readers for the reconstruction toolkit's on-disk formats.

Implements just enough of the documented ``.rspf`` container and dataset
manifest JSON (see the toolkit's ``docs/file_formats.md``) to load
training corpora.  Kept independent of the toolkit's code on purpose.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"RSPF0001"
MANIFEST_SCHEMA = "respf-dataset-manifest-v1"


class FormatError(RuntimeError):
    """File does not follow the documented container or manifest layout."""


def load_rspf(path: str | Path) -> np.ndarray:
    """Load the float32 payload of an ``.rspf`` file as an (rows, cols) array."""
    blob = Path(path).read_bytes()
    if len(blob) < len(MAGIC) + 4 or blob[: len(MAGIC)] != MAGIC:
        raise FormatError(f"{path}: not an RSPF array file")
    (hdr_len,) = struct.unpack_from("<I", blob, len(MAGIC))
    hdr_start = len(MAGIC) + 4
    if hdr_start + hdr_len > len(blob):
        raise FormatError(f"{path}: file ends inside header")
    try:
        header = json.loads(blob[hdr_start : hdr_start + hdr_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: header is not valid JSON: {exc}") from exc
    shape = tuple(int(s) for s in header.get("shape", ()))
    if len(shape) != 2 or any(s <= 0 for s in shape):
        raise FormatError(f"{path}: bad shape {shape}")
    payload = blob[hdr_start + hdr_len :]
    if len(payload) != 4 * shape[0] * shape[1]:
        raise FormatError(
            f"{path}: payload has {len(payload)} bytes, shape {shape} needs "
            f"{4 * shape[0] * shape[1]}"
        )
    values = np.frombuffer(payload, dtype="<f4").reshape(shape)
    if not np.all(np.isfinite(values)):
        raise FormatError(f"{path}: payload contains non-finite values")
    return np.array(values)  # writable copy


def load_manifest_cases(path: str | Path) -> list[dict]:
    """Return the case dicts of a dataset manifest, schema-checked."""
    path = Path(path)
    payload = json.loads(path.read_text())
    if payload.get("schema") != MANIFEST_SCHEMA:
        raise FormatError(
            f"{path}: unsupported manifest schema {payload.get('schema')!r}"
        )
    cases = payload.get("cases")
    if not isinstance(cases, list) or not cases:
        raise FormatError(f"{path}: manifest lists no cases")
    for case in cases:
        for key in ("case_id", "phantom"):
            if key not in case:
                raise FormatError(f"{path}: case missing key {key!r}")
    return cases
