"""Image-quality metrics: PSNR, windowed SSIM, and a noise-power spectrum.

All functions are pure and operate on :class:`~respf.arrays.Image` pairs of
identical shape.  PSNR is capped (default 99 dB) so that identical images
produce a finite, stable report value.  SSIM uses the standard 11x11
Gaussian window (sigma 1.5) with K1=0.01, K2=0.03; the dynamic range
defaults to ``max(ref) - min(ref)`` and can be fixed externally, which is
required for constant references.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.signal import convolve2d

from .arrays import Image
from .errors import ParameterError

__all__ = [
    "MetricReport",
    "psnr",
    "ssim",
    "local_ssim",
    "nps",
]

_SSIM_WINDOW = 11
_SSIM_SIGMA = 1.5
_K1 = 0.01
_K2 = 0.03


@dataclass(frozen=True)
class MetricReport:
    """Bundle of the standard per-case metrics."""

    psnr: float
    ssim: float
    nps: Image | None = None


def _check_pair(x: Image, ref: Image) -> tuple[np.ndarray, np.ndarray]:
    if x.values.shape != ref.values.shape:
        raise ParameterError(
            f"image shape {x.values.shape} does not match reference {ref.values.shape}"
        )
    return x.as_float64(), ref.as_float64()


def psnr(x: Image, ref: Image, peak: float | str = "auto", cap: float = 99.0) -> float:
    """``20 log10(peak / sqrt(MSE))``, clipped at ``cap`` dB.

    ``peak="auto"`` uses ``max(ref)``, which must be positive; identical
    images return the cap.
    """
    xv, rv = _check_pair(x, ref)
    if peak == "auto":
        peak_value = float(rv.max())
    else:
        peak_value = float(peak)
    if not peak_value > 0:
        raise ParameterError(f"peak must be > 0, got {peak_value}")
    if cap <= 0:
        raise ParameterError(f"cap must be > 0, got {cap}")
    mse = float(np.mean((xv - rv) ** 2))
    if mse == 0.0:
        return float(cap)
    return min(float(cap), 20.0 * math.log10(peak_value / math.sqrt(mse)))


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    half = (size - 1) / 2.0
    coords = np.arange(size, dtype=np.float64) - half
    g = np.exp(-(coords * coords) / (2.0 * sigma * sigma))
    w = np.outer(g, g)
    return w / w.sum()


def local_ssim(
    x: Image,
    ref: Image,
    dynamic_range: float | None = None,
) -> tuple[float, Image]:
    """Mean SSIM plus the valid-window local SSIM map.

    The map has shape ``(H - 10, W - 10)`` (valid-mode windows).  When
    ``dynamic_range`` is None it is taken from the reference; a constant
    reference then has zero range and is rejected.
    """
    xv, rv = _check_pair(x, ref)
    h, w = xv.shape
    if min(h, w) < _SSIM_WINDOW:
        raise ParameterError(
            f"images must be at least {_SSIM_WINDOW}x{_SSIM_WINDOW} for SSIM, got {h}x{w}"
        )
    if dynamic_range is None:
        dynamic_range = float(rv.max() - rv.min())
    if not dynamic_range > 0:
        raise ParameterError(
            "dynamic range must be > 0; pass dynamic_range explicitly for constant references"
        )
    c1 = (_K1 * dynamic_range) ** 2
    c2 = (_K2 * dynamic_range) ** 2
    win = _gaussian_window(_SSIM_WINDOW, _SSIM_SIGMA)

    mu_x = convolve2d(xv, win, mode="valid")
    mu_r = convolve2d(rv, win, mode="valid")
    xx = convolve2d(xv * xv, win, mode="valid") - mu_x * mu_x
    rr = convolve2d(rv * rv, win, mode="valid") - mu_r * mu_r
    xr = convolve2d(xv * rv, win, mode="valid") - mu_x * mu_r

    num = (2.0 * mu_x * mu_r + c1) * (2.0 * xr + c2)
    den = (mu_x * mu_x + mu_r * mu_r + c1) * (xx + rr + c2)
    ssim_map = num / den
    return float(ssim_map.mean()), Image(ssim_map, pixel_size=x.pixel_size, unit="ssim")


def ssim(x: Image, ref: Image, dynamic_range: float | None = None) -> float:
    """Mean local SSIM; see :func:`local_ssim`."""
    return local_ssim(x, ref, dynamic_range)[0]


def nps(residual: Image, roi: tuple[int, int, int, int]) -> Image:
    """Noise-power spectrum of a rectangular region of the residual.

    ``roi`` is ``(row_start, col_start, n_rows, n_cols)``.  Returns
    ``|DFT2(region - mean)|^2`` with the DC bin moved to the center.
    """
    r0, c0, nr, nc = (int(v) for v in roi)
    h, w = residual.values.shape
    if nr <= 0 or nc <= 0:
        raise ParameterError(f"ROI must be non-empty, got {nr}x{nc}")
    if r0 < 0 or c0 < 0 or r0 + nr > h or c0 + nc > w:
        raise ParameterError(f"ROI {roi} exceeds image bounds {h}x{w}")
    region = residual.as_float64()[r0 : r0 + nr, c0 : c0 + nc]
    centered = region - region.mean()
    spectrum = np.abs(np.fft.fftshift(np.fft.fft2(centered))) ** 2
    return Image(spectrum, pixel_size=residual.pixel_size, unit="power")
