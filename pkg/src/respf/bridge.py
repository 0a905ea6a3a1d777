"""Wire protocol for hosting a denoiser outside the reconstruction process.

Frame layout (little-endian), also documented in ``docs/file_formats.md``
and pinned by ``docs/bridge_test_vectors.json``:

    [u32 total_length][u32 header_length][header JSON utf-8][payload f32 LE]

``total_length`` counts everything after itself: the 4-byte header-length
field, the header bytes, and the payload bytes.  Headers are JSON objects
with an ``op`` field; this client emits canonical JSON (sorted keys,
compact separators) and accepts any valid JSON from servers.

Conversation: the client opens with ``hello{protocol_version}``, the
server answers ``hello_ack{protocol_version, N, D, supports_condition}``.
After that the client sends ``denoise{sigma, shape, has_condition}``
frames whose payload is the image (optionally followed by the condition
image) and receives ``denoised{shape}`` or ``error{message}`` frames.
``shutdown`` ends the session without a reply.  Exactly one request is in
flight at a time.

Transports: a child process speaking the protocol on its standard
streams (default), or a TCP socket.  :func:`serve_denoiser` implements
the server side of the same protocol for in-repo test servers.
"""

from __future__ import annotations

import json
import os
import select
import socket
import struct
import subprocess
import time
from typing import BinaryIO, Sequence

import numpy as np

from .arrays import Image
from .errors import (
    BridgeError,
    BridgeTimeoutError,
    ParameterError,
    ProtocolError,
    RemoteDenoiserError,
    VersionMismatchError,
)

__all__ = [
    "PROTOCOL_VERSION",
    "encode_frame",
    "decode_frame",
    "RemoteDenoiser",
    "serve_denoiser",
    "serve_stdio",
]

PROTOCOL_VERSION = 1
_MAX_FRAME = 1 << 31  # sanity bound on declared lengths


def _canonical_header(header: dict) -> bytes:
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")


def encode_frame(header: dict, payload: bytes = b"") -> bytes:
    """Serialize one protocol frame."""
    head = _canonical_header(header)
    total = 4 + len(head) + len(payload)
    return struct.pack("<I", total) + struct.pack("<I", len(head)) + head + payload


def decode_frame(frame: bytes) -> tuple[dict, bytes]:
    """Parse one complete frame (prefix included); inverse of encode_frame."""
    if len(frame) < 8:
        raise ProtocolError(f"frame too short: {len(frame)} bytes")
    (total,) = struct.unpack_from("<I", frame, 0)
    if total != len(frame) - 4:
        raise ProtocolError(f"length prefix {total} does not match frame body {len(frame) - 4}")
    header, payload = _parse_body(frame[4:])
    return header, payload


def _parse_body(body: bytes) -> tuple[dict, bytes]:
    if len(body) < 4:
        raise ProtocolError("frame body shorter than the header-length field")
    (header_len,) = struct.unpack_from("<I", body, 0)
    if header_len > len(body) - 4:
        raise ProtocolError(f"declared header length {header_len} exceeds body {len(body) - 4}")
    try:
        header = json.loads(body[4 : 4 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise ProtocolError(f"header is not valid JSON: {err}") from err
    if not isinstance(header, dict) or "op" not in header:
        raise ProtocolError("header must be a JSON object with an 'op' field")
    return header, body[4 + header_len :]


class _Channel:
    """Byte transport with select-based read timeouts."""

    def __init__(self, read_fd: int, write: BinaryIO | socket.socket):
        self._read_fd = read_fd
        self._write = write

    def send(self, data: bytes) -> None:
        if isinstance(self._write, socket.socket):
            self._write.sendall(data)
        else:
            self._write.write(data)
            self._write.flush()

    def recv_exact(self, n: int, timeout: float) -> bytes:
        deadline = time.monotonic() + timeout
        chunks: list[bytes] = []
        remaining = n
        while remaining > 0:
            wait = deadline - time.monotonic()
            if wait <= 0:
                raise BridgeTimeoutError(f"no data within {timeout:.3g} s ({remaining} bytes missing)")
            ready, _, _ = select.select([self._read_fd], [], [], wait)
            if not ready:
                raise BridgeTimeoutError(f"no data within {timeout:.3g} s ({remaining} bytes missing)")
            chunk = os.read(self._read_fd, remaining)
            if not chunk:
                raise ProtocolError("connection closed mid-frame")
            chunks.append(chunk)
            remaining -= len(chunk)
        return b"".join(chunks)

    def close(self) -> None:
        if isinstance(self._write, socket.socket):
            self._write.close()
        else:
            try:
                self._write.close()
            except OSError:
                pass


def _read_frame(channel: _Channel, timeout: float) -> tuple[dict, bytes]:
    (total,) = struct.unpack("<I", channel.recv_exact(4, timeout))
    if not 4 <= total <= _MAX_FRAME:
        raise ProtocolError(f"implausible frame length {total}")
    return _parse_body(channel.recv_exact(total, timeout))


def _image_payload(img: Image) -> bytes:
    return np.ascontiguousarray(img.values, dtype="<f4").tobytes()


class RemoteDenoiser:
    """DenoiserModel backed by a protocol server; see the module docstring.

    Use :meth:`spawn` for a child process or :meth:`connect_tcp` for a
    socket endpoint; both perform the handshake before returning.
    """

    def __init__(self, channel: _Channel, timeout: float = 10.0, _proc=None):
        self._channel = channel
        self._timeout = float(timeout)
        self._proc = _proc
        self._busy = False
        self._closed = False
        try:
            self._metadata = self._handshake()
        except BaseException:
            self._abort()
            raise

    @classmethod
    def spawn(cls, cmd: Sequence[str], timeout: float = 10.0) -> "RemoteDenoiser":
        proc = subprocess.Popen(
            list(cmd), stdin=subprocess.PIPE, stdout=subprocess.PIPE
        )
        channel = _Channel(proc.stdout.fileno(), proc.stdin)
        return cls(channel, timeout=timeout, _proc=proc)

    @classmethod
    def connect_tcp(cls, host: str, port: int, timeout: float = 10.0) -> "RemoteDenoiser":
        sock = socket.create_connection((host, port), timeout=timeout)
        sock.settimeout(None)
        return cls(_Channel(sock.fileno(), sock), timeout=timeout)

    def _handshake(self) -> dict:
        self._channel.send(
            encode_frame({"op": "hello", "protocol_version": PROTOCOL_VERSION})
        )
        header, _ = _read_frame(self._channel, self._timeout)
        if header["op"] == "error":
            raise RemoteDenoiserError(f"server rejected handshake: {header.get('message')}")
        if header["op"] != "hello_ack":
            raise ProtocolError(f"expected hello_ack, got {header['op']!r}")
        version = header.get("protocol_version")
        if version != PROTOCOL_VERSION:
            raise VersionMismatchError(
                f"server speaks protocol version {version}, client {PROTOCOL_VERSION}"
            )
        missing = {"N", "D", "supports_condition"} - set(header)
        if missing:
            raise ProtocolError(f"hello_ack missing fields {sorted(missing)}")
        return {
            "N": int(header["N"]),
            "D": header["D"],
            "supports_condition": bool(header["supports_condition"]),
        }

    def metadata(self) -> dict:
        return dict(self._metadata)

    def denoise(self, x_t: Image, sigma: float, condition: Image | None = None) -> Image:
        if self._closed:
            raise BridgeError("denoiser connection already closed")
        if self._busy:
            raise BridgeError("one request already in flight on this connection")
        if condition is not None and not self._metadata["supports_condition"]:
            raise ParameterError("server does not support conditioning")
        n_declared = self._metadata["N"]
        if n_declared and x_t.values.size != n_declared:
            raise ParameterError(
                f"image has {x_t.values.size} pixels, server expects {n_declared}"
            )
        if condition is not None and condition.values.shape != x_t.values.shape:
            raise ParameterError(
                f"condition shape {condition.values.shape} differs from image {x_t.values.shape}"
            )
        header = {
            "op": "denoise",
            "sigma": float(sigma),
            "shape": list(x_t.values.shape),
            "has_condition": condition is not None,
        }
        payload = _image_payload(x_t)
        if condition is not None:
            payload += _image_payload(condition)
        self._busy = True
        try:
            self._channel.send(encode_frame(header, payload))
            reply, data = _read_frame(self._channel, self._timeout)
        finally:
            self._busy = False
        if reply["op"] == "error":
            raise RemoteDenoiserError(f"server error: {reply.get('message')}")
        if reply["op"] != "denoised":
            raise ProtocolError(f"expected denoised, got {reply['op']!r}")
        shape = tuple(int(s) for s in reply.get("shape", ()))
        expected = int(np.prod(shape)) * 4 if shape else -1
        if len(shape) != 2 or expected != len(data):
            raise ProtocolError(
                f"payload of {len(data)} bytes does not match declared shape {shape}"
            )
        values = np.frombuffer(data, dtype="<f4").reshape(shape)
        return Image(values, pixel_size=x_t.pixel_size, unit=x_t.unit)

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        try:
            self._channel.send(encode_frame({"op": "shutdown"}))
        except (OSError, ValueError):
            pass
        self._channel.close()
        if self._proc is not None:
            try:
                self._proc.wait(timeout=5.0)
            except subprocess.TimeoutExpired:
                self._proc.kill()
                self._proc.wait()
            if self._proc.stdout is not None:
                self._proc.stdout.close()

    def _abort(self) -> None:
        """Tear down after a failed handshake without the shutdown exchange."""
        self._closed = True
        self._channel.close()
        if self._proc is not None:
            self._proc.kill()
            self._proc.wait()
            if self._proc.stdout is not None:
                self._proc.stdout.close()

    def __enter__(self) -> "RemoteDenoiser":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


# ---- server side (used by in-repo test servers) ----


def _ack_header(denoiser) -> dict:
    meta = denoiser.metadata()
    return {
        "op": "hello_ack",
        "protocol_version": PROTOCOL_VERSION,
        "N": int(meta.get("N", 0)),
        "D": meta.get("D", "infinite"),
        "supports_condition": bool(meta.get("supports_condition", False)),
    }


def serve_denoiser(denoiser, read_fd: int, write: BinaryIO | socket.socket) -> None:
    """Answer protocol frames with ``denoiser`` until shutdown or EOF.

    Any exception while handling a request is reported to the client as
    an error frame; the loop keeps serving afterwards.
    """
    channel = _Channel(read_fd, write)
    while True:
        try:
            header, payload = _read_frame(channel, timeout=3600.0)
        except (ProtocolError, BridgeTimeoutError):
            return
        op = header.get("op")
        if op == "shutdown":
            return
        if op == "hello":
            channel.send(encode_frame(_ack_header(denoiser)))
            continue
        if op != "denoise":
            channel.send(encode_frame({"op": "error", "message": f"unsupported op {op!r}"}))
            continue
        try:
            shape = tuple(int(s) for s in header["shape"])
            count = int(np.prod(shape))
            x_values = np.frombuffer(payload[: 4 * count], dtype="<f4").reshape(shape)
            condition = None
            if header.get("has_condition"):
                condition = Image(
                    np.frombuffer(payload[4 * count : 8 * count], dtype="<f4").reshape(shape)
                )
            result = denoiser.denoise(Image(x_values), float(header["sigma"]), condition)
            channel.send(
                encode_frame(
                    {"op": "denoised", "shape": list(result.values.shape)},
                    _image_payload(result),
                )
            )
        except Exception as err:  # surfaced to the client, loop continues
            channel.send(encode_frame({"op": "error", "message": str(err)}))


def serve_stdio(denoiser) -> None:
    """Serve the protocol on this process's standard streams."""
    import sys

    serve_denoiser(denoiser, sys.stdin.fileno(), sys.stdout.buffer)
