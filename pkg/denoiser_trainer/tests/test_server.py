"""Server conversation behavior over real subprocess pipes."""

from __future__ import annotations

import math
import subprocess
import sys

import numpy as np
import pytest

pytest.importorskip("denoiser_trainer.train")
torch = pytest.importorskip("torch")

from denoiser_trainer.train import Corpus, TrainConfig, save_bundle, train  # noqa: E402
from denoiser_trainer.wire import encode_frame, read_frame  # noqa: E402

SIZE = 16


@pytest.fixture(scope="module")
def bundle(tmp_path_factory):
    rng = np.random.default_rng(3)
    x0 = rng.uniform(0, 1, size=(1, SIZE, SIZE)).astype(np.float32)
    cond = (x0 + 0.1 * rng.normal(size=x0.shape)).astype(np.float32)
    corpus = Corpus(torch.from_numpy(x0[:, None]), torch.from_numpy(cond[:, None]), ["c"])
    cfg = TrainConfig(steps=30, batch_size=4, seed=1, base_channels=8)
    model, losses = train(corpus, cfg)
    return save_bundle(model, losses, corpus, cfg, tmp_path_factory.mktemp("ckpt"))


@pytest.fixture()
def server(bundle):
    proc = subprocess.Popen(
        [sys.executable, "-m", "denoiser_trainer.serve", "--checkpoint", str(bundle)],
        stdin=subprocess.PIPE,
        stdout=subprocess.PIPE,
    )
    yield proc
    if proc.poll() is None:
        proc.kill()
    proc.wait(timeout=10)


def ask(proc, header: dict, payload: bytes = b"") -> tuple[dict, bytes]:
    proc.stdin.write(encode_frame(header, payload))
    proc.stdin.flush()
    frame = read_frame(proc.stdout)
    assert frame is not None, "server closed the stream"
    return frame


def handshake(proc) -> dict:
    header, payload = ask(proc, {"op": "hello", "protocol_version": 1})
    assert header["op"] == "hello_ack"
    assert payload == b""
    return header


def image_payload(values: np.ndarray) -> bytes:
    return np.ascontiguousarray(values, dtype="<f4").tobytes()


def test_handshake_reports_bundle_metadata(server):
    ack = handshake(server)
    assert ack["protocol_version"] == 1
    assert ack["N"] == SIZE * SIZE
    assert ack["D"] == 128.0
    assert ack["supports_condition"] is True


def test_denoise_zero_image_returns_finite_result(server):
    handshake(server)
    zeros = np.zeros((SIZE, SIZE), dtype=np.float32)
    cond = np.zeros((SIZE, SIZE), dtype=np.float32)
    header, payload = ask(
        server,
        {"op": "denoise", "sigma": 0.5, "shape": [SIZE, SIZE], "has_condition": True},
        image_payload(zeros) + image_payload(cond),
    )
    assert header == {"op": "denoised", "shape": [SIZE, SIZE]}
    out = np.frombuffer(payload, dtype="<f4").reshape(SIZE, SIZE)
    assert np.all(np.isfinite(out))
    print("PASS server denoise: finite 16x16 output for a zero request")


def test_denoise_without_condition_uses_zero_condition(server):
    handshake(server)
    rng = np.random.default_rng(0)
    x = rng.normal(size=(SIZE, SIZE)).astype(np.float32)
    header, payload = ask(
        server,
        {"op": "denoise", "sigma": 80.0, "shape": [SIZE, SIZE], "has_condition": False},
        image_payload(x),
    )
    assert header["op"] == "denoised"
    assert np.all(np.isfinite(np.frombuffer(payload, dtype="<f4")))


def test_bad_requests_get_error_frames_and_session_survives(server):
    handshake(server)
    header, _ = ask(
        server, {"op": "denoise", "sigma": 1.0, "shape": [4, 4], "has_condition": False},
        image_payload(np.zeros((4, 4), dtype=np.float32)),
    )
    assert header["op"] == "error"
    assert "256 pixels" in header["message"]

    header, _ = ask(
        server,
        {"op": "denoise", "sigma": -1.0, "shape": [SIZE, SIZE], "has_condition": False},
        image_payload(np.zeros((SIZE, SIZE), dtype=np.float32)),
    )
    assert header["op"] == "error"

    header, _ = ask(server, {"op": "frobnicate"})
    assert header["op"] == "error"

    # The session is still usable after three failed requests.
    header, _ = ask(
        server,
        {"op": "denoise", "sigma": 1.0, "shape": [SIZE, SIZE], "has_condition": False},
        image_payload(np.zeros((SIZE, SIZE), dtype=np.float32)),
    )
    assert header["op"] == "denoised"


def test_wrong_protocol_version_is_refused(server):
    header, _ = ask(server, {"op": "hello", "protocol_version": 99})
    assert header["op"] == "error"
    assert "protocol_version" in header["message"]


def test_shutdown_ends_the_process(server):
    handshake(server)
    server.stdin.write(encode_frame({"op": "shutdown"}))
    server.stdin.flush()
    assert server.wait(timeout=10) == 0


def test_sigma_extremes_stay_finite(server):
    # DenoiserModel contract across the sampler's schedule range.
    handshake(server)
    rng = np.random.default_rng(8)
    x = rng.normal(size=(SIZE, SIZE)).astype(np.float32)
    cond = rng.normal(size=(SIZE, SIZE)).astype(np.float32)
    for sigma in (0.002, 1.0, 80.0):
        header, payload = ask(
            server,
            {"op": "denoise", "sigma": sigma, "shape": [SIZE, SIZE], "has_condition": True},
            image_payload(x) + image_payload(cond),
        )
        assert header["op"] == "denoised"
        out = np.frombuffer(payload, dtype="<f4")
        assert np.all(np.isfinite(out))
        assert not math.isnan(float(out.sum()))
