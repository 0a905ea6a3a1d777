"""Training loop for the conditional denoiser.

Each step draws a batch of (clean, condition) pairs, perturbs the clean
image on a sphere of radius r = sigma * sqrt(D) (exact radius, direction
uniform), samples sigma from the log-normal convention
ln(sigma) ~ N(-1.2, 1.2^2), and minimizes

    lambda(sigma) * || D(x_t, x_sp; sigma) - x_0 ||^2,
    lambda(sigma) = (sigma^2 + sd^2) / (sigma * sd)^2

which weights every noise level equally under the preconditioning in
:mod:`.model`.  The result is a checkpoint bundle: ``weights.pt`` plus a
``metadata.json`` whose fields mirror the protocol handshake.

Run as ``python -m denoiser_trainer.train --manifest M --conditions DIR
--out CKPT``; conditions are ``{case_id}_fbp.rspf`` files produced by the
reconstruction toolkit's FBP method.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .model import EdmDenoiser
from .rspf_io import load_manifest_cases, load_rspf

SIGMA_LOG_MEAN = -1.2
SIGMA_LOG_STD = 1.2
CHECKPOINT_SCHEMA = "denoiser-checkpoint-v1"


@dataclass
class TrainConfig:
    d: float = 128.0
    steps: int = 2000
    batch_size: int = 8
    learning_rate: float = 1e-3
    seed: int = 0
    base_channels: int = 16
    log_every: int = 50
    fixed_sigma: float | None = None  # train at one noise level instead of sampling

    def __post_init__(self) -> None:
        if self.d < 1.0:
            raise ValueError(f"augmented dimension D must be >= 1, got {self.d}")
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch_size must be positive")
        if self.fixed_sigma is not None and self.fixed_sigma <= 0:
            raise ValueError("fixed_sigma must be positive")


@dataclass
class Corpus:
    clean: torch.Tensor  # (n, 1, H, W)
    condition: torch.Tensor  # (n, 1, H, W)
    case_ids: list[str] = field(default_factory=list)

    @property
    def image_size(self) -> int:
        return int(self.clean.shape[-1])

    @property
    def sigma_data(self) -> float:
        return float(self.clean.std())


def load_corpus(manifest_path: str | Path, conditions_dir: str | Path) -> Corpus:
    """Pair each manifest phantom with its FBP condition image."""
    manifest_path = Path(manifest_path)
    conditions_dir = Path(conditions_dir)
    clean, cond, ids = [], [], []
    for case in load_manifest_cases(manifest_path):
        x0 = load_rspf(manifest_path.parent / case["phantom"])
        cond_path = conditions_dir / f"{case['case_id']}_fbp.rspf"
        if not cond_path.exists():
            raise FileNotFoundError(f"missing condition image {cond_path}")
        x_sp = load_rspf(cond_path)
        if x_sp.shape != x0.shape:
            raise ValueError(
                f"condition {cond_path} shape {x_sp.shape} != phantom {x0.shape}"
            )
        clean.append(x0)
        cond.append(x_sp)
        ids.append(str(case["case_id"]))
    h, w = clean[0].shape
    if h != w or h & (h - 1):
        raise ValueError(f"images must be square powers of two, got {h}x{w}")
    if any(img.shape != (h, w) for img in clean):
        raise ValueError("corpus images must share one size")
    to_t = lambda arrs: torch.from_numpy(np.stack(arrs)[:, None, :, :].astype(np.float32))
    return Corpus(to_t(clean), to_t(cond), ids)


def _sample_batch(
    corpus: Corpus, cfg: TrainConfig, gen: torch.Generator
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
    n = corpus.clean.shape[0]
    idx = torch.randint(n, (cfg.batch_size,), generator=gen)
    x0 = corpus.clean[idx]
    x_sp = corpus.condition[idx]
    if cfg.fixed_sigma is not None:
        sigma = torch.full((cfg.batch_size,), float(cfg.fixed_sigma))
    else:
        sigma = torch.exp(
            SIGMA_LOG_MEAN + SIGMA_LOG_STD * torch.randn(cfg.batch_size, generator=gen)
        )
    eps = torch.randn(x0.shape, generator=gen)
    flat = eps.reshape(cfg.batch_size, -1)
    unit = flat / flat.norm(dim=1, keepdim=True)
    r = sigma * math.sqrt(cfg.d)
    x_t = x0 + (r[:, None] * unit).reshape(x0.shape)
    return x0, x_sp, x_t, sigma


def train(corpus: Corpus, cfg: TrainConfig) -> tuple[EdmDenoiser, list[float]]:
    """Train on the corpus; returns the model and the per-step loss curve.

    Raises ``RuntimeError`` (with the seed, for reproduction) if the loss
    goes non-finite.
    """
    torch.manual_seed(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed + 1)
    model = EdmDenoiser(base_channels=cfg.base_channels, sigma_data=corpus.sigma_data)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    sd = corpus.sigma_data
    losses: list[float] = []
    for step in range(cfg.steps):
        x0, x_sp, x_t, sigma = _sample_batch(corpus, cfg, gen)
        weight = (sigma**2 + sd**2) / (sigma * sd) ** 2
        pred = model(x_t, x_sp, sigma)
        loss = (weight[:, None, None, None] * (pred - x0) ** 2).mean()
        if not torch.isfinite(loss):
            raise RuntimeError(
                f"training loss became non-finite at step {step} (seed {cfg.seed})"
            )
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))
    return model, losses


def save_bundle(
    model: EdmDenoiser,
    losses: list[float],
    corpus: Corpus,
    cfg: TrainConfig,
    out_dir: str | Path,
) -> Path:
    """Write ``weights.pt`` + ``metadata.json``; returns the bundle directory."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), out / "weights.pt")
    n = corpus.image_size
    stride = max(1, cfg.log_every)
    metadata = {
        "schema": CHECKPOINT_SCHEMA,
        "N": n * n,
        "D": float(cfg.d),
        "supports_condition": True,
        "image_size": n,
        "sigma_data": corpus.sigma_data,
        "base_channels": cfg.base_channels,
        "train_seed": cfg.seed,
        "train_steps": cfg.steps,
        "loss_curve": [
            {"step": k, "loss": losses[k]} for k in range(0, len(losses), stride)
        ]
        + [{"step": len(losses) - 1, "loss": losses[-1]}],
    }
    (out / "metadata.json").write_text(json.dumps(metadata, indent=2, sort_keys=True) + "\n")
    return out


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="python -m denoiser_trainer.train",
        description="Train the toy conditional denoiser on a dataset manifest.",
    )
    parser.add_argument("--manifest", required=True, help="dataset manifest JSON")
    parser.add_argument(
        "--conditions", required=True,
        help="directory of {case_id}_fbp.rspf condition images",
    )
    parser.add_argument("--out", required=True, help="checkpoint bundle directory")
    parser.add_argument("--d", type=float, default=128.0, help="augmented dimension")
    parser.add_argument("--steps", type=int, default=2000)
    parser.add_argument("--batch-size", type=int, default=8)
    parser.add_argument("--learning-rate", type=float, default=1e-3)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--base-channels", type=int, default=16)
    parser.add_argument("--log-every", type=int, default=50)
    parser.add_argument("--fixed-sigma", type=float, default=None)
    args = parser.parse_args(argv)

    cfg = TrainConfig(
        d=args.d,
        steps=args.steps,
        batch_size=args.batch_size,
        learning_rate=args.learning_rate,
        seed=args.seed,
        base_channels=args.base_channels,
        log_every=args.log_every,
        fixed_sigma=args.fixed_sigma,
    )
    corpus = load_corpus(args.manifest, args.conditions)
    model, losses = train(corpus, cfg)
    out = save_bundle(model, losses, corpus, cfg, args.out)
    print(
        f"trained {cfg.steps} steps on {len(corpus.case_ids)} cases: "
        f"loss {losses[0]:.4f} -> {losses[-1]:.4f}; bundle at {out}"
    )
    return 0


if __name__ == "__main__":
    sys.exit(main())
