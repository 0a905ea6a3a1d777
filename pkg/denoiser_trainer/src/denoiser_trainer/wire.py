"""Independent implementation of the denoiser wire protocol (version 1).

Frame layout, little-endian, per the toolkit's ``docs/file_formats.md``:

    [u32 total_length][u32 header_length][header JSON utf-8][payload]

``total_length`` counts the 4-byte header-length field, the header bytes,
and the payload bytes.  Headers are JSON objects with an ``op`` field and
are emitted as canonical JSON (sorted keys, compact separators).  Image
payloads are row-major little-endian float32.
"""

from __future__ import annotations

import json
import struct
from typing import BinaryIO

PROTOCOL_VERSION = 1
_MAX_FRAME = 1 << 31


class WireError(RuntimeError):
    """Malformed frame or conversation-level protocol violation."""


def encode_frame(header: dict, payload: bytes = b"") -> bytes:
    hdr = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    total = 4 + len(hdr) + len(payload)
    return struct.pack("<II", total, len(hdr)) + hdr + payload


def decode_frame(blob: bytes) -> tuple[dict, bytes]:
    if len(blob) < 8:
        raise WireError(f"frame too short: {len(blob)} bytes")
    total, hdr_len = struct.unpack_from("<II", blob)
    if total != len(blob) - 4:
        raise WireError(f"total_length {total} does not match frame of {len(blob)} bytes")
    if hdr_len > total - 4:
        raise WireError(f"header_length {hdr_len} exceeds frame body")
    hdr_bytes = blob[8 : 8 + hdr_len]
    try:
        header = json.loads(hdr_bytes.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise WireError(f"header is not valid JSON: {exc}") from exc
    if not isinstance(header, dict) or "op" not in header:
        raise WireError("header must be a JSON object with an 'op' field")
    return header, blob[8 + hdr_len :]


def read_frame(stream: BinaryIO) -> tuple[dict, bytes] | None:
    """Read one frame; ``None`` on clean EOF before any byte of a frame."""
    first = stream.read(4)
    if not first:
        return None
    if len(first) < 4:
        raise WireError("stream ended inside frame length")
    (total,) = struct.unpack("<I", first)
    if total < 4 or total > _MAX_FRAME:
        raise WireError(f"implausible total_length {total}")
    body = b""
    while len(body) < total:
        chunk = stream.read(total - len(body))
        if not chunk:
            raise WireError("stream ended inside frame body")
        body += chunk
    return decode_frame(first + body)


def write_frame(stream: BinaryIO, header: dict, payload: bytes = b"") -> None:
    stream.write(encode_frame(header, payload))
    stream.flush()
