"""Training-loop behavior: overfit, denoising sanity, determinism, corpus I/O."""

from __future__ import annotations

import json
import math
import struct

import numpy as np
import pytest

pytest.importorskip("denoiser_trainer.train")
torch = pytest.importorskip("torch")

from denoiser_trainer.rspf_io import FormatError, load_rspf  # noqa: E402
from denoiser_trainer.train import (  # noqa: E402
    Corpus,
    TrainConfig,
    load_corpus,
    save_bundle,
    train,
)


def toy_corpus(n: int, size: int = 32, seed: int = 5) -> Corpus:
    rng = np.random.default_rng(seed)
    x0 = rng.uniform(0, 1, size=(n, size, size)).astype(np.float32)
    cond = (x0 + 0.1 * rng.normal(size=x0.shape)).astype(np.float32)
    return Corpus(
        torch.from_numpy(x0[:, None]),
        torch.from_numpy(cond[:, None]),
        [f"c{k}" for k in range(n)],
    )


def write_rspf(path, values: np.ndarray, kind: str = "image") -> None:
    header = json.dumps(
        {
            "kind": kind,
            "shape": list(values.shape),
            "unit": "attenuation",
            "meta": {"pixel_size": 1.0},
        },
        sort_keys=True,
        separators=(",", ":"),
    ).encode()
    path.write_bytes(
        b"RSPF0001"
        + struct.pack("<I", len(header))
        + header
        + np.ascontiguousarray(values, dtype="<f4").tobytes()
    )


def test_single_image_overfit_reaches_ten_percent_of_initial_loss():
    corpus = toy_corpus(1)
    model, losses = train(corpus, TrainConfig(steps=2000, batch_size=8, seed=0))
    initial = losses[0]
    trailing = float(np.mean(losses[-50:]))
    assert trailing < 0.1 * initial
    print(
        f"PASS trainer overfit: loss {initial:.4f} -> trailing mean {trailing:.4f} "
        f"({trailing / initial:.1%} of initial) in 2000 steps"
    )


def test_fixed_tiny_sigma_output_beats_its_input():
    # Trained at sigma = 0.01 only: the denoised estimate must be closer to
    # the clean image than the perturbed input is, on held-in data.
    corpus = toy_corpus(3, size=16)
    cfg = TrainConfig(steps=300, batch_size=4, seed=2, fixed_sigma=0.01)
    model, _ = train(corpus, cfg)
    sigma = 0.01
    gen = torch.Generator().manual_seed(123)
    x0 = corpus.clean
    eps = torch.randn(x0.shape, generator=gen)
    unit = eps.reshape(x0.shape[0], -1)
    unit = unit / unit.norm(dim=1, keepdim=True)
    x_t = x0 + (sigma * math.sqrt(cfg.d)) * unit.reshape(x0.shape)
    with torch.no_grad():
        out = model(x_t, corpus.condition, torch.full((x0.shape[0],), sigma))
    mse_in = float(((x_t - x0) ** 2).mean())
    mse_out = float(((out - x0) ** 2).mean())
    assert mse_out < mse_in
    print(
        "PASS fixed-sigma sanity: output PSNR gain "
        f"{10 * math.log10(mse_in / mse_out):.2f} dB over the perturbed input"
    )


def test_seed_fixed_rerun_reproduces_loss_curve():
    # Documented determinism tolerance: 1e-6 relative (single-process CPU
    # runs on this stack are in fact bitwise identical).
    corpus = toy_corpus(3)
    cfg = TrainConfig(steps=60, batch_size=4, seed=9)
    _, first = train(corpus, cfg)
    _, second = train(corpus, cfg)
    np.testing.assert_allclose(first, second, rtol=1e-6, atol=0.0)


def test_non_finite_loss_aborts_with_seed():
    corpus = toy_corpus(1)
    corpus.clean[0, 0, 0, 0] = float("nan")
    with pytest.raises(RuntimeError, match="non-finite at step 0 \\(seed 4\\)"):
        train(corpus, TrainConfig(steps=5, batch_size=2, seed=4))


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(d=0.5)
    with pytest.raises(ValueError):
        TrainConfig(steps=0)
    with pytest.raises(ValueError):
        TrainConfig(fixed_sigma=0.0)


def test_load_corpus_pairs_manifest_with_conditions(tmp_path):
    size = 16
    rng = np.random.default_rng(1)
    cases = []
    cond_dir = tmp_path / "cond"
    cond_dir.mkdir()
    for k in range(2):
        x0 = rng.uniform(0, 1, size=(size, size)).astype(np.float32)
        write_rspf(tmp_path / f"p{k}.rspf", x0)
        write_rspf(cond_dir / f"c{k}_fbp.rspf", x0 + 0.05)
        cases.append({"case_id": f"c{k}", "phantom": f"p{k}.rspf"})
    manifest = tmp_path / "manifest.json"
    manifest.write_text(
        json.dumps({"schema": "respf-dataset-manifest-v1", "cases": cases})
    )
    corpus = load_corpus(manifest, cond_dir)
    assert corpus.clean.shape == (2, 1, size, size)
    assert corpus.case_ids == ["c0", "c1"]
    assert np.allclose(
        corpus.condition.numpy(), corpus.clean.numpy() + 0.05, atol=1e-6
    )

    (cond_dir / "c1_fbp.rspf").unlink()
    with pytest.raises(FileNotFoundError):
        load_corpus(manifest, cond_dir)


def test_load_corpus_rejects_non_power_of_two(tmp_path):
    x0 = np.zeros((15, 15), dtype=np.float32)
    write_rspf(tmp_path / "p.rspf", x0)
    cond_dir = tmp_path / "cond"
    cond_dir.mkdir()
    write_rspf(cond_dir / "c_fbp.rspf", x0)
    manifest = tmp_path / "manifest.json"
    manifest.write_text(
        json.dumps(
            {
                "schema": "respf-dataset-manifest-v1",
                "cases": [{"case_id": "c", "phantom": "p.rspf"}],
            }
        )
    )
    with pytest.raises(ValueError, match="powers of two"):
        load_corpus(manifest, cond_dir)


def test_rspf_reader_validates(tmp_path):
    p = tmp_path / "bad.rspf"
    p.write_bytes(b"NOTMAGIC" + b"\x00" * 16)
    with pytest.raises(FormatError):
        load_rspf(p)
    good = tmp_path / "good.rspf"
    values = np.arange(6, dtype=np.float32).reshape(2, 3)
    write_rspf(good, values)
    assert np.array_equal(load_rspf(good), values)
    truncated = tmp_path / "trunc.rspf"
    truncated.write_bytes(good.read_bytes()[:-4])
    with pytest.raises(FormatError):
        load_rspf(truncated)


def test_save_bundle_metadata_matches_handshake(tmp_path):
    corpus = toy_corpus(1, size=16)
    cfg = TrainConfig(steps=5, batch_size=2, seed=7, base_channels=8)
    model, losses = train(corpus, cfg)
    out = save_bundle(model, losses, corpus, cfg, tmp_path / "ckpt")
    metadata = json.loads((out / "metadata.json").read_text())
    assert metadata["N"] == 256
    assert metadata["D"] == 128.0
    assert metadata["supports_condition"] is True
    assert metadata["train_seed"] == 7
    assert metadata["loss_curve"][0]["step"] == 0
    assert metadata["loss_curve"][-1]["step"] == 4
    assert (out / "weights.pt").exists()
