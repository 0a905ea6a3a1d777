"""Hybrid reconstruction pipeline: hijacked sampling with per-step data consistency.

The reconstruction starts from an analytic (FBP) image, jumps onto the
sampling trajectory at a configurable noise level (hijack), and then
alternates three moves per schedule step: a Heun ODE update under the
denoiser prior, a short ASD-POCS solve that pulls the generative output
toward the measured sinogram, and a linear fusion of the two branches.
The fused image seeds the next step, so measurement information
propagates through the remaining trajectory.

Two fusion conventions are exposed because the weighting of the two
branches is ambiguous in common usage: ``eq25`` weights the generative
branch by alpha, ``alg1`` (the default) weights the data-consistent
branch by alpha.  ``fusion_alpha=0.4`` with ``alg1`` therefore keeps
0.4 of the physics branch.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .arrays import Image, Sinogram
from .asdpocs import AsdPocsConfig, asd_pocs_run, data_residual_norm, tv_norm
from .errors import ParameterError
from .fbp import FbpConfig, fbp_reconstruct
from .flow import DenoiserModel, NoiseSchedule, heun_step, hijack_init, make_schedule
from .geometry import FanBeamGeometry, ViewMask
from .metrics import psnr

__all__ = [
    "ResPFConfig",
    "StepLogRow",
    "ResPFResult",
    "fuse_residual",
    "respf_reconstruct",
    "write_step_log",
]

_CONVENTIONS = ("eq25", "alg1")


@dataclass(frozen=True)
class ResPFConfig:
    """Pipeline parameters.

    Attributes
    ----------
    schedule : NoiseSchedule
        Sampling grid; the hijack level is ``times[hijack_index]``.
    hijack_index : int or None
        Step index where the trajectory starts; None means
        ``n_steps - 2`` (a single sampling step, the cheapest setting).
    fusion_alpha : float in [0, 1]
        Fusion coefficient; its meaning depends on the convention.
    fusion_convention : {"alg1", "eq25"}
        ``alg1``: ``alpha * phys + (1 - alpha) * gen``;
        ``eq25``: ``alpha * gen + (1 - alpha) * phys``.
    dc_config : AsdPocsConfig
        Per-step data-consistency solve, warm-started from the
        generative output each step.
    denoiser_source : {"exact", "remote"}
        How the CLI constructs the denoiser; the library itself accepts
        any DenoiserModel instance.
    rng_seed : int
        Seed for the hijack noise.
    fbp_config : FbpConfig or None
        Filter settings for the initial analytic image.
    """

    schedule: NoiseSchedule = field(default_factory=make_schedule)
    hijack_index: int | None = None
    fusion_alpha: float = 0.4
    fusion_convention: str = "alg1"
    dc_config: AsdPocsConfig = field(default_factory=AsdPocsConfig)
    denoiser_source: str = "exact"
    rng_seed: int = 0
    fbp_config: FbpConfig | None = None

    def __post_init__(self) -> None:
        n = self.schedule.n_steps
        tau = self.hijack_index
        if tau is not None and not 0 <= tau <= n - 2:
            raise ParameterError(f"hijack_index must be in [0, {n - 2}], got {tau}")
        if not 0.0 <= self.fusion_alpha <= 1.0:
            raise ParameterError(f"fusion_alpha must be in [0, 1], got {self.fusion_alpha}")
        if self.fusion_convention not in _CONVENTIONS:
            raise ParameterError(
                f"fusion_convention must be one of {_CONVENTIONS}, got {self.fusion_convention!r}"
            )
        if self.denoiser_source not in ("exact", "remote"):
            raise ParameterError(
                f"denoiser_source must be 'exact' or 'remote', got {self.denoiser_source!r}"
            )

    @property
    def resolved_hijack_index(self) -> int:
        return self.schedule.n_steps - 2 if self.hijack_index is None else self.hijack_index


def fuse_residual(gen: Image, phys: Image, alpha: float, convention: str = "alg1") -> Image:
    """Linear fusion of the generative and data-consistent branches.

    Degenerate weights short-circuit to the untouched input image so that
    alpha in {0, 1} reproduces the single-branch pipeline bit for bit.
    """
    if gen.values.shape != phys.values.shape:
        raise ParameterError(
            f"branch shapes differ: {gen.values.shape} vs {phys.values.shape}"
        )
    if not 0.0 <= alpha <= 1.0:
        raise ParameterError(f"alpha must be in [0, 1], got {alpha}")
    if convention not in _CONVENTIONS:
        raise ParameterError(f"convention must be one of {_CONVENTIONS}, got {convention!r}")
    w_gen = alpha if convention == "eq25" else 1.0 - alpha
    if w_gen == 1.0:
        return gen
    if w_gen == 0.0:
        return phys
    fused = w_gen * gen.as_float64() + (1.0 - w_gen) * phys.as_float64()
    return gen.with_values(fused)


@dataclass(frozen=True)
class StepLogRow:
    """One sampling step: index, noise level, and image diagnostics."""

    step: int
    t: float
    psnr_db: float | None
    residual_norm: float
    tv: float


@dataclass(frozen=True)
class ResPFResult:
    """Everything the pipeline produced: images plus the per-step log."""

    final: Image
    x_sp: Image
    hijack: Image
    per_step_log: tuple[StepLogRow, ...]


def write_step_log(rows: Sequence[StepLogRow], path: str | Path) -> Path:
    """Write the per-step log as CSV; PSNR is ``n/a`` without a reference."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "t_i", "psnr_db", "residual_norm", "tv"])
        for row in rows:
            writer.writerow(
                [
                    row.step,
                    repr(row.t),
                    "n/a" if row.psnr_db is None else repr(row.psnr_db),
                    repr(row.residual_norm),
                    repr(row.tv),
                ]
            )
    return path


def _with_step_context(err: Exception, step: int, t: float) -> Exception:
    err.args = (f"pipeline step {step} (t_i={t:.6g}): {err}",)
    return err


def respf_reconstruct(
    y_sp: Sinogram,
    geom: FanBeamGeometry,
    mask: ViewMask,
    cfg: ResPFConfig | None = None,
    denoiser: DenoiserModel | None = None,
    reference: Image | None = None,
) -> ResPFResult:
    """Reconstruct from a sparse-view sinogram.

    ``y_sp`` holds only the kept views; its angles must match
    ``geom.view_angles[mask.kept]``.  The denoiser receives the FBP image
    as conditioning only when its metadata advertises
    ``supports_condition``.  When ``reference`` is given, each log row
    carries PSNR against it.
    """
    cfg = cfg or ResPFConfig()
    if denoiser is None:
        raise ParameterError("a denoiser is required")
    if y_sp.n_views != mask.kept.size or mask.n_views != geom.n_views:
        raise ParameterError(
            f"sinogram has {y_sp.n_views} views but mask keeps {mask.kept.size} of {mask.n_views}"
        )
    if y_sp.n_detectors != geom.n_detectors:
        raise ParameterError(
            f"sinogram has {y_sp.n_detectors} detectors, geometry {geom.n_detectors}"
        )
    kept_angles = geom.view_angles[mask.kept]
    if not np.allclose(y_sp.view_angles, kept_angles, rtol=0.0, atol=1e-12):
        raise ParameterError("sinogram view angles do not match the masked geometry angles")

    x_sp = fbp_reconstruct(y_sp, geom, cfg.fbp_config)
    tau = cfg.resolved_hijack_index
    times = cfg.schedule.times
    hijack = hijack_init(x_sp, float(times[tau]), cfg.rng_seed)

    meta = denoiser.metadata()
    condition = x_sp if bool(meta.get("supports_condition", False)) else None

    x = hijack
    rows: list[StepLogRow] = []
    for i in range(tau, cfg.schedule.n_steps - 1):
        t_i = float(times[i])
        t_next = float(times[i + 1])
        try:
            gen = heun_step(x, t_i, t_next, denoiser, condition)
            phys = asd_pocs_run(gen, y_sp, geom, mask, cfg.dc_config)
            x = fuse_residual(gen, phys, cfg.fusion_alpha, cfg.fusion_convention)
        except Exception as err:
            raise _with_step_context(err, i, t_i)
        rows.append(
            StepLogRow(
                step=i,
                t=t_i,
                psnr_db=None if reference is None else psnr(x, reference),
                residual_norm=data_residual_norm(x, y_sp, geom, mask),
                tv=tv_norm(x),
            )
        )
    return ResPFResult(final=x, x_sp=x_sp, hijack=hijack, per_step_log=tuple(rows))
