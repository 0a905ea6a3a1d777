"""Protocol server: load a checkpoint bundle and answer denoise requests.

Implements the version-1 conversation from the toolkit's
``docs/file_formats.md``: ``hello`` -> ``hello_ack`` (echoing the bundle's
N/D/supports_condition), then ``denoise`` -> ``denoised`` frames until
``shutdown`` or EOF.  Request-level failures are answered with ``error``
frames and the session stays alive.

Run as ``python -m denoiser_trainer.serve --checkpoint CKPT_DIR`` to speak
frames on stdin/stdout, or add ``--tcp PORT`` to listen on localhost.
"""

from __future__ import annotations

import argparse
import json
import socket
import sys
from pathlib import Path
from typing import BinaryIO

import numpy as np
import torch

from .model import EdmDenoiser
from .train import CHECKPOINT_SCHEMA
from .wire import PROTOCOL_VERSION, WireError, read_frame, write_frame


def load_bundle(ckpt_dir: str | Path) -> tuple[EdmDenoiser, dict]:
    ckpt_dir = Path(ckpt_dir)
    metadata = json.loads((ckpt_dir / "metadata.json").read_text())
    if metadata.get("schema") != CHECKPOINT_SCHEMA:
        raise ValueError(f"unsupported checkpoint schema {metadata.get('schema')!r}")
    model = EdmDenoiser(
        base_channels=int(metadata["base_channels"]),
        sigma_data=float(metadata["sigma_data"]),
    )
    state = torch.load(ckpt_dir / "weights.pt", map_location="cpu", weights_only=True)
    model.load_state_dict(state)
    model.eval()
    return model, metadata


def _denoise(
    model: EdmDenoiser, x_t: np.ndarray, sigma: float, condition: np.ndarray | None
) -> np.ndarray:
    cond = condition if condition is not None else np.zeros_like(x_t)
    with torch.no_grad():
        out = model(
            torch.from_numpy(x_t)[None, None],
            torch.from_numpy(cond)[None, None],
            torch.tensor([float(sigma)]),
        )
    result = out[0, 0].numpy().astype(np.float32)
    if not np.all(np.isfinite(result)):
        raise RuntimeError("model produced non-finite values")
    return result


def _parse_request(header: dict, payload: bytes, n_pixels: int):
    sigma = header.get("sigma")
    shape = header.get("shape")
    if not isinstance(sigma, (int, float)) or sigma <= 0:
        raise WireError(f"denoise needs a positive sigma, got {sigma!r}")
    if (
        not isinstance(shape, list)
        or len(shape) != 2
        or any(not isinstance(s, int) or s <= 0 for s in shape)
    ):
        raise WireError(f"denoise needs shape [h, w], got {shape!r}")
    h, w = shape
    if h * w != n_pixels:
        raise WireError(f"model expects {n_pixels} pixels, got shape {shape}")
    has_condition = bool(header.get("has_condition", False))
    n_images = 2 if has_condition else 1
    if len(payload) != 4 * h * w * n_images:
        raise WireError(
            f"payload has {len(payload)} bytes for {n_images} image(s) of shape {shape}"
        )
    data = np.frombuffer(payload, dtype="<f4")
    x_t = np.array(data[: h * w].reshape(h, w))
    condition = np.array(data[h * w :].reshape(h, w)) if has_condition else None
    return x_t, float(sigma), condition


def serve(model: EdmDenoiser, metadata: dict, rfile: BinaryIO, wfile: BinaryIO) -> None:
    n_pixels = int(metadata["N"])
    while True:
        try:
            frame = read_frame(rfile)
        except WireError:
            return  # unrecoverable stream corruption
        if frame is None:
            return
        header, payload = frame
        op = header.get("op")
        if op == "hello":
            if header.get("protocol_version") != PROTOCOL_VERSION:
                write_frame(
                    wfile,
                    {
                        "op": "error",
                        "message": f"unsupported protocol_version "
                        f"{header.get('protocol_version')!r}",
                    },
                )
                continue
            write_frame(
                wfile,
                {
                    "op": "hello_ack",
                    "protocol_version": PROTOCOL_VERSION,
                    "N": n_pixels,
                    "D": float(metadata["D"]),
                    "supports_condition": bool(metadata["supports_condition"]),
                },
            )
        elif op == "denoise":
            try:
                x_t, sigma, condition = _parse_request(header, payload, n_pixels)
                result = _denoise(model, x_t, sigma, condition)
            except (WireError, RuntimeError, ValueError) as exc:
                write_frame(wfile, {"op": "error", "message": str(exc)})
                continue
            write_frame(
                wfile,
                {"op": "denoised", "shape": list(result.shape)},
                np.ascontiguousarray(result, dtype="<f4").tobytes(),
            )
        elif op == "shutdown":
            return
        else:
            write_frame(wfile, {"op": "error", "message": f"unknown op {op!r}"})


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="python -m denoiser_trainer.serve",
        description="Serve a trained denoiser over the wire protocol.",
    )
    parser.add_argument("--checkpoint", required=True, help="bundle directory")
    parser.add_argument(
        "--tcp", type=int, default=None,
        help="listen on localhost:PORT instead of stdin/stdout",
    )
    args = parser.parse_args(argv)

    torch.set_num_threads(1)
    model, metadata = load_bundle(args.checkpoint)
    if args.tcp is None:
        serve(model, metadata, sys.stdin.buffer, sys.stdout.buffer)
        return 0
    with socket.create_server(("127.0.0.1", args.tcp)) as server:
        print(f"listening on 127.0.0.1:{server.getsockname()[1]}", file=sys.stderr)
        while True:
            conn, _ = server.accept()
            with conn, conn.makefile("rb") as rf, conn.makefile("wb") as wf:
                serve(model, metadata, rf, wf)


if __name__ == "__main__":
    sys.exit(main())
