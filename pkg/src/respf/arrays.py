"""Core array types and the on-disk array container.

Two value types flow through every stage of the toolkit:

* :class:`Image` -- a 2-D attenuation grid with a physical pixel size.
* :class:`Sinogram` -- per-view detector rows with their view angles.

Both store 32-bit floats (row-major, C order) and are immutable: the
wrapped numpy buffer is marked read-only at construction and every public
operation returns a new object.  Heavy kernels accumulate in 64-bit and
cast back to 32-bit at the API boundary.

On-disk container ("RSPF" array file)
-------------------------------------
::

    offset  size          content
    0       8             magic, ASCII "RSPF0001"
    8       4             header length H, uint32 little-endian
    12      H             UTF-8 JSON header
    12+H    4*prod(shape) payload, float32 little-endian, row-major

Header keys: ``kind`` ("image" or "sinogram"), ``shape`` (list of ints,
rows first), ``unit`` (string tag), ``meta`` (kind-specific: images carry
``pixel_size``; sinograms carry ``view_angles`` in radians).  Headers are
written as canonical JSON (sorted keys, no whitespace) so identical data
produces identical bytes.  A save/load round trip is bit-exact.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .errors import (
    ArrayFileError,
    BadMagicError,
    NonFiniteValueError,
    ParameterError,
    ShapeMismatchError,
    TruncatedFileError,
)

MAGIC = b"RSPF0001"

__all__ = [
    "MAGIC",
    "Image",
    "Sinogram",
    "save_array",
    "load_array",
    "normalize_window",
    "write_pgm",
    "write_png",
]


def _frozen_f32(values: Any, name: str) -> np.ndarray:
    arr = np.array(values, dtype=np.float32, order="C", copy=True)
    if arr.ndim != 2:
        raise ParameterError(f"{name} values must be 2-D, got shape {arr.shape}")
    if arr.size == 0:
        raise ParameterError(f"{name} values must be non-empty")
    if not np.all(np.isfinite(arr)):
        raise ParameterError(f"{name} values must be finite")
    arr.setflags(write=False)
    return arr


# ---- value types ----


@dataclass(frozen=True)
class Image:
    """A 2-D scalar grid on square pixels.

    Parameters
    ----------
    values : array_like
        Pixel values, shape ``(height, width)``.  Stored as read-only
        float32.  Row index runs along +y, column index along +x, with
        the grid centered on the rotation isocenter.
    pixel_size : float
        Pixel edge length in mm.
    unit : str
        Value semantics tag, e.g. ``"attenuation"`` or ``"normalized"``.
    """

    values: np.ndarray
    pixel_size: float = 1.0
    unit: str = "attenuation"

    def __post_init__(self) -> None:
        object.__setattr__(self, "values", _frozen_f32(self.values, "Image"))
        if not (float(self.pixel_size) > 0.0):
            raise ParameterError(f"pixel_size must be > 0, got {self.pixel_size}")

    @property
    def height(self) -> int:
        return int(self.values.shape[0])

    @property
    def width(self) -> int:
        return int(self.values.shape[1])

    def with_values(self, values: Any, unit: str | None = None) -> "Image":
        """New image with the same pixel size, replacing values (and optionally unit)."""
        return Image(values, pixel_size=self.pixel_size, unit=self.unit if unit is None else unit)

    def as_float64(self) -> np.ndarray:
        """Writable float64 copy for high-precision kernels."""
        return self.values.astype(np.float64)


@dataclass(frozen=True)
class Sinogram:
    """Line-integral data for a set of views.

    Parameters
    ----------
    values : array_like
        Shape ``(n_views, n_detectors)``; entry ``[v, k]`` is the line
        integral along detector ``k`` of view ``v`` in mm * value units.
    view_angles : array_like
        View angles in radians, strictly increasing, one per row.
    unit : str
        Value semantics tag.
    """

    values: np.ndarray
    view_angles: np.ndarray
    unit: str = "line-integral"

    def __post_init__(self) -> None:
        object.__setattr__(self, "values", _frozen_f32(self.values, "Sinogram"))
        angles = np.array(self.view_angles, dtype=np.float64, copy=True)
        if angles.ndim != 1 or angles.shape[0] != self.values.shape[0]:
            raise ParameterError(
                f"view_angles must be 1-D with one entry per view, got shape "
                f"{angles.shape} for {self.values.shape[0]} views"
            )
        if not np.all(np.isfinite(angles)):
            raise ParameterError("view_angles must be finite")
        if angles.shape[0] > 1 and not np.all(np.diff(angles) > 0):
            raise ParameterError("view_angles must be strictly increasing")
        angles.setflags(write=False)
        object.__setattr__(self, "view_angles", angles)

    @property
    def n_views(self) -> int:
        return int(self.values.shape[0])

    @property
    def n_detectors(self) -> int:
        return int(self.values.shape[1])

    def with_values(self, values: Any, unit: str | None = None) -> "Sinogram":
        """New sinogram with the same angles, replacing values (and optionally unit)."""
        return Sinogram(values, self.view_angles, unit=self.unit if unit is None else unit)


# ---- container I/O ----


def _canonical_header(header: dict) -> bytes:
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_array(path: str | Path, obj: Image | Sinogram) -> None:
    """Write an :class:`Image` or :class:`Sinogram` to the RSPF container.

    The write is atomic at the file level only in the sense that the full
    byte string is assembled first; concurrent readers of a half-written
    file will fail the magic or truncation checks in :func:`load_array`.
    """
    if isinstance(obj, Image):
        meta: dict[str, Any] = {"pixel_size": float(obj.pixel_size)}
        kind = "image"
    elif isinstance(obj, Sinogram):
        meta = {"view_angles": [float(a) for a in obj.view_angles]}
        kind = "sinogram"
    else:
        raise ParameterError(f"save_array expects Image or Sinogram, got {type(obj).__name__}")
    header = {
        "kind": kind,
        "shape": [int(s) for s in obj.values.shape],
        "unit": obj.unit,
        "meta": meta,
    }
    hdr = _canonical_header(header)
    payload = np.ascontiguousarray(obj.values, dtype="<f4").tobytes()
    blob = MAGIC + struct.pack("<I", len(hdr)) + hdr + payload
    Path(path).write_bytes(blob)


def _read_exact(blob: bytes, offset: int, n: int, what: str) -> bytes:
    if offset + n > len(blob):
        raise TruncatedFileError(f"file ends inside {what}: need {n} bytes at offset {offset}")
    return blob[offset : offset + n]


def load_array(path: str | Path, nan_policy: str = "reject") -> Image | Sinogram:
    """Read an RSPF container back into its value type.

    Parameters
    ----------
    path : path-like
        File written by :func:`save_array`.
    nan_policy : {"reject", "sanitize"}
        ``"reject"`` raises :class:`NonFiniteValueError` on NaN/Inf in the
        payload; ``"sanitize"`` replaces them with 0 before construction.

    Raises
    ------
    BadMagicError, TruncatedFileError, ShapeMismatchError, NonFiniteValueError
    """
    if nan_policy not in ("reject", "sanitize"):
        raise ParameterError(f"nan_policy must be 'reject' or 'sanitize', got {nan_policy!r}")
    blob = Path(path).read_bytes()
    if len(blob) < len(MAGIC) or blob[: len(MAGIC)] != MAGIC:
        raise BadMagicError(f"{path}: not an RSPF array file")
    off = len(MAGIC)
    (hdr_len,) = struct.unpack("<I", _read_exact(blob, off, 4, "header length"))
    off += 4
    hdr_bytes = _read_exact(blob, off, hdr_len, "header")
    off += hdr_len
    try:
        header = json.loads(hdr_bytes.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ArrayFileError(f"{path}: header is not valid JSON: {exc}") from exc
    for key in ("kind", "shape", "unit", "meta"):
        if key not in header:
            raise ArrayFileError(f"{path}: header missing key {key!r}")
    shape = tuple(int(s) for s in header["shape"])
    if len(shape) != 2 or any(s <= 0 for s in shape):
        raise ArrayFileError(f"{path}: bad shape {shape}")
    n_values = shape[0] * shape[1]
    payload = blob[off:]
    if len(payload) < 4 * n_values:
        raise TruncatedFileError(
            f"{path}: payload has {len(payload)} bytes, shape {shape} needs {4 * n_values}"
        )
    if len(payload) > 4 * n_values:
        raise ShapeMismatchError(
            f"{path}: payload has {len(payload)} bytes, shape {shape} declares {4 * n_values}"
        )
    values = np.frombuffer(payload, dtype="<f4").reshape(shape)
    if not np.all(np.isfinite(values)):
        if nan_policy == "reject":
            raise NonFiniteValueError(f"{path}: payload contains non-finite values")
        values = np.nan_to_num(values, nan=0.0, posinf=0.0, neginf=0.0)
    kind = header["kind"]
    meta = header["meta"]
    if kind == "image":
        return Image(values, pixel_size=float(meta.get("pixel_size", 1.0)), unit=header["unit"])
    if kind == "sinogram":
        if "view_angles" not in meta:
            raise ArrayFileError(f"{path}: sinogram header missing view_angles")
        return Sinogram(values, np.asarray(meta["view_angles"], dtype=np.float64), unit=header["unit"])
    raise ArrayFileError(f"{path}: unknown kind {kind!r}")


# ---- display helpers ----


def normalize_window(img: Image, window_lo: float, window_hi: float) -> Image:
    """Affine map of ``[window_lo, window_hi]`` onto ``[0, 1]`` with clamping.

    Values at or below ``window_lo`` map to 0, at or above ``window_hi``
    to 1.  The result carries unit ``"normalized"``.
    """
    lo = float(window_lo)
    hi = float(window_hi)
    if not hi > lo:
        raise ParameterError(f"window must satisfy hi > lo, got [{lo}, {hi}]")
    scaled = (img.values.astype(np.float64) - lo) / (hi - lo)
    return img.with_values(np.clip(scaled, 0.0, 1.0), unit="normalized")


def _to_u8(img: Image) -> np.ndarray:
    # Display rows run top-down while grid rows run along +y, so flip.
    vals = np.clip(img.values.astype(np.float64), 0.0, 1.0)
    return np.flipud(np.round(vals * 255.0).astype(np.uint8))


def write_pgm(path: str | Path, img: Image) -> None:
    """Write an 8-bit binary PGM (values are clamped to [0, 1] first)."""
    u8 = _to_u8(img)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{u8.shape[1]} {u8.shape[0]}\n255\n".encode("ascii"))
        fh.write(u8.tobytes())


def write_png(path: str | Path, img: Image) -> None:
    """Write an 8-bit grayscale PNG (values are clamped to [0, 1] first)."""
    from PIL import Image as PILImage

    PILImage.fromarray(_to_u8(img), mode="L").save(str(path), format="PNG")
