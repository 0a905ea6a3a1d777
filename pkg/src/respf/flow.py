"""Poisson-flow generative core: schedule, perturbations, denoisers, sampler.

The sampler integrates ``dx/dt = (x - f(x, t)) / t`` backwards along a
rho-warped time grid with Heun's predictor-corrector scheme, where
``f`` predicts the clean image at noise level ``t``.  The exact empirical
denoiser realizes ``f`` in closed form for a finite charge set: a
posterior mean under the heavy-tailed augmented-dimension kernel
``w_j ~ (||x_t - v_j||^2 + r^2)^{-(N+D)/2}`` with ``r = sigma * sqrt(D)``,
or its Gaussian limit ``w_j ~ exp(-||x_t - v_j||^2 / (2 sigma^2))`` as
``D -> infinity``.  Weights are computed in the log domain with
max-subtraction, so they normalize to 1 at any noise level.

Trajectories can start from pure noise (``start_index = 0``) or hijack a
measurement-informed state partway down the schedule; the hijack state is
``x_sp + sigma_t0 * eps`` with plain Gaussian noise.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence, runtime_checkable

import numpy as np

from .arrays import Image, save_array
from .errors import ParameterError

__all__ = [
    "NoiseSchedule",
    "make_schedule",
    "ChargeSet",
    "DenoiserModel",
    "ExactEmpiricalDenoiser",
    "INFINITE_D",
    "charge_weights",
    "exact_denoise",
    "perturb_spherical",
    "hijack_init",
    "heun_step",
    "sample_trajectory",
    "dump_trajectory",
]

INFINITE_D = math.inf
_WEIGHT_MODES = ("pfgmpp", "gaussian-limit")


# ---- noise schedule ----


@dataclass(frozen=True)
class NoiseSchedule:
    """Strictly decreasing noise levels from sigma_max to sigma_min."""

    sigma_max: float = 80.0
    sigma_min: float = 0.002
    rho: float = 7.0
    n_steps: int = 16
    times: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        if not (self.sigma_max > self.sigma_min > 0.0):
            raise ParameterError(
                f"need sigma_max > sigma_min > 0, got {self.sigma_max}, {self.sigma_min}"
            )
        if self.rho <= 0:
            raise ParameterError(f"rho must be > 0, got {self.rho}")
        if self.n_steps < 2:
            raise ParameterError(f"n_steps must be >= 2, got {self.n_steps}")
        hi = self.sigma_max ** (1.0 / self.rho)
        lo = self.sigma_min ** (1.0 / self.rho)
        frac = np.arange(self.n_steps, dtype=np.float64) / (self.n_steps - 1)
        times = (hi + frac * (lo - hi)) ** self.rho
        # Pin the endpoints: the power round trip may be off by an ulp.
        times[0] = self.sigma_max
        times[-1] = self.sigma_min
        if not np.all(np.diff(times) < 0):
            raise ParameterError("schedule times failed to decrease strictly")
        times.setflags(write=False)
        object.__setattr__(self, "times", times)


def make_schedule(
    sigma_max: float = 80.0,
    sigma_min: float = 0.002,
    rho: float = 7.0,
    n_steps: int = 16,
) -> NoiseSchedule:
    """Rho-warped grid: ``t_i = (s_max^(1/rho) + i/(n-1) (s_min^(1/rho) - s_max^(1/rho)))^rho``."""
    return NoiseSchedule(sigma_max=sigma_max, sigma_min=sigma_min, rho=rho, n_steps=n_steps)


# ---- charges and denoisers ----


@dataclass(frozen=True)
class ChargeSet:
    """Finite empirical distribution the exact denoiser averages over.

    Parameters
    ----------
    charges : sequence of Image
        Non-empty, all the same shape.
    D : float
        Augmented dimension of the underlying flow; ``INFINITE_D``
        (``math.inf``) selects the Gaussian limit.
    """

    charges: tuple[Image, ...]
    D: float = 128.0

    def __post_init__(self) -> None:
        charges = tuple(self.charges)
        if not charges:
            raise ParameterError("charge set must be non-empty")
        shape = charges[0].values.shape
        if any(c.values.shape != shape for c in charges):
            raise ParameterError("all charges must share one shape")
        if not (self.D >= 1.0):
            raise ParameterError(f"D must be >= 1 or infinite, got {self.D}")
        object.__setattr__(self, "charges", charges)
        stacked = np.stack([c.values.astype(np.float64) for c in charges])
        stacked.setflags(write=False)
        object.__setattr__(self, "_stacked", stacked)

    @property
    def n_charges(self) -> int:
        return len(self.charges)

    @property
    def N(self) -> int:
        return int(self.charges[0].values.size)

    @property
    def is_gaussian_limit(self) -> bool:
        return math.isinf(self.D)

    def stacked(self) -> np.ndarray:
        """(n_charges, height, width) float64 view of the charges."""
        return self._stacked  # type: ignore[attr-defined]


@runtime_checkable
class DenoiserModel(Protocol):
    """Clean-image predictor consumed by the sampler.

    ``denoise`` must return an image of the input shape with finite values
    for any finite input and sigma within the schedule range.
    ``metadata`` reports ``{"N": int, "D": number or "infinite",
    "supports_condition": bool}``.
    """

    def denoise(self, x_t: Image, sigma: float, condition: Image | None = None) -> Image:
        ...

    def metadata(self) -> dict:
        ...


def charge_weights(
    x_t: Image,
    sigma: float,
    cs: ChargeSet,
    weight_mode: str | None = None,
) -> np.ndarray:
    """Normalized posterior weights of each charge given the noisy state.

    ``weight_mode`` defaults to ``"pfgmpp"`` for finite ``cs.D`` and
    ``"gaussian-limit"`` otherwise; it can be forced to either to compare
    the two weightings at the same D.
    """
    if sigma <= 0:
        raise ParameterError(f"sigma must be > 0, got {sigma}")
    if weight_mode is None:
        weight_mode = "gaussian-limit" if cs.is_gaussian_limit else "pfgmpp"
    if weight_mode not in _WEIGHT_MODES:
        raise ParameterError(f"weight_mode must be one of {_WEIGHT_MODES}, got {weight_mode!r}")
    if x_t.values.shape != cs.charges[0].values.shape:
        raise ParameterError(
            f"x_t shape {x_t.values.shape} does not match charges {cs.charges[0].values.shape}"
        )
    diffs = cs.stacked() - x_t.as_float64()[None, :, :]
    d2 = np.sum(diffs * diffs, axis=(1, 2))
    if weight_mode == "pfgmpp":
        if cs.is_gaussian_limit:
            raise ParameterError("pfgmpp weights need a finite D")
        r2 = (sigma * sigma) * cs.D
        log_w = -0.5 * (cs.N + cs.D) * np.log(d2 + r2)
    else:
        log_w = -d2 / (2.0 * sigma * sigma)
    log_w -= log_w.max()
    w = np.exp(log_w)
    return w / w.sum()


def exact_denoise(
    x_t: Image,
    sigma: float,
    cs: ChargeSet,
    weight_mode: str | None = None,
) -> Image:
    """Posterior-mean denoiser over the charge set (log-domain weights).

    The output is a convex combination of the charges, so every pixel lies
    within the per-pixel min/max over the set.
    """
    w = charge_weights(x_t, sigma, cs, weight_mode)
    mean = np.sum(w[:, None, None] * cs.stacked(), axis=0)
    return x_t.with_values(mean)


@dataclass(frozen=True)
class ExactEmpiricalDenoiser:
    """DenoiserModel wrapper around :func:`exact_denoise`.

    The conditioning argument is accepted and ignored: the empirical
    posterior mean is already fully determined by the charge set, which is
    why ``metadata()["supports_condition"]`` is False.
    """

    charge_set: ChargeSet
    weight_mode: str | None = None

    def __post_init__(self) -> None:
        if self.weight_mode is not None and self.weight_mode not in _WEIGHT_MODES:
            raise ParameterError(
                f"weight_mode must be one of {_WEIGHT_MODES}, got {self.weight_mode!r}"
            )

    def denoise(self, x_t: Image, sigma: float, condition: Image | None = None) -> Image:
        return exact_denoise(x_t, sigma, self.charge_set, self.weight_mode)

    def metadata(self) -> dict:
        d = self.charge_set.D
        return {
            "N": self.charge_set.N,
            "D": "infinite" if math.isinf(d) else float(d),
            "supports_condition": False,
        }


# ---- stochastic initializations ----


def perturb_spherical(x0: Image, r: float, rng_seed: int) -> Image:
    """``x0 + r * eps / ||eps||``: a perturbation of exact radius ``r``."""
    if r < 0:
        raise ParameterError(f"r must be >= 0, got {r}")
    if r == 0.0:
        return x0
    rng = np.random.default_rng(rng_seed)
    eps = rng.standard_normal(x0.values.shape)
    norm = float(np.linalg.norm(eps))
    while norm == 0.0:  # probability zero, but keeps the contract total
        eps = rng.standard_normal(x0.values.shape)
        norm = float(np.linalg.norm(eps))
    return x0.with_values(x0.as_float64() + (r / norm) * eps)


def hijack_init(x_sp: Image, sigma_t0: float, rng_seed: int) -> Image:
    """Gaussian ``x_sp + sigma_t0 * eps``: the trajectory entry state.

    Unlike :func:`perturb_spherical` the radius is not fixed; its squared
    norm concentrates around ``sigma_t0^2 * N``.
    """
    if sigma_t0 < 0:
        raise ParameterError(f"sigma_t0 must be >= 0, got {sigma_t0}")
    if sigma_t0 == 0.0:
        return x_sp
    rng = np.random.default_rng(rng_seed)
    eps = rng.standard_normal(x_sp.values.shape)
    return x_sp.with_values(x_sp.as_float64() + sigma_t0 * eps)


# ---- sampling ----


def heun_step(
    x_i: Image,
    t_i: float,
    t_next: float,
    denoiser: DenoiserModel,
    condition: Image | None = None,
) -> Image:
    """One predictor-corrector step of the probability-flow ODE.

    Euler predictor along ``d_i = (x_i - f(x_i, t_i)) / t_i``, then an
    averaged-slope correction evaluated at the predicted state; the
    correction is skipped when ``t_next == 0`` where the slope is
    undefined.
    """
    if t_i <= 0:
        raise ParameterError(f"t_i must be > 0, got {t_i}")
    if t_next < 0:
        raise ParameterError(f"t_next must be >= 0, got {t_next}")
    x = x_i.as_float64()
    d_i = (x - denoiser.denoise(x_i, float(t_i), condition).as_float64()) / t_i
    h = t_next - t_i
    predicted = x_i.with_values(x + h * d_i)
    if t_next == 0.0:
        return predicted
    d_next = (
        predicted.as_float64()
        - denoiser.denoise(predicted, float(t_next), condition).as_float64()
    ) / t_next
    return x_i.with_values(x + h * 0.5 * (d_i + d_next))


def sample_trajectory(
    start: Image,
    schedule: NoiseSchedule,
    start_index: int,
    denoiser: DenoiserModel,
    condition: Image | None = None,
) -> list[Image]:
    """Integrate from ``times[start_index]`` down to ``times[-1]``.

    Returns every visited state, the start included, so a start index of
    ``n_steps - 2`` yields exactly one step (two states).
    """
    n = schedule.n_steps
    if not 0 <= start_index < n - 1:
        raise ParameterError(f"start_index must be in [0, {n - 1}), got {start_index}")
    states = [start]
    x = start
    for i in range(start_index, n - 1):
        x = heun_step(x, float(schedule.times[i]), float(schedule.times[i + 1]), denoiser, condition)
        states.append(x)
    return states


def dump_trajectory(
    states: Sequence[Image],
    schedule: NoiseSchedule,
    start_index: int,
    out_dir: str | Path,
    prefix: str = "state",
) -> Path:
    """Write each state as an array file plus a CSV of per-step norms.

    Returns the CSV path.  Row ``k`` covers ``states[k]`` at schedule time
    ``times[start_index + k]``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / f"{prefix}_norms.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "time", "l2_norm"])
        for k, state in enumerate(states):
            save_array(out / f"{prefix}_{k:03d}.rspf", state)
            t = float(schedule.times[start_index + k])
            writer.writerow([start_index + k, repr(t), repr(float(np.linalg.norm(state.values)))])
    return csv_path
