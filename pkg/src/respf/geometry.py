"""Fan-beam acquisition geometry and view selection masks.

Conventions
-----------
The rotation isocenter is the origin.  For view angle ``beta`` the source
sits at ``(R * cos(beta), R * sin(beta))`` with ``R = source_to_center``.
The detector is an equiangular arc: element ``k`` subtends fan angle
``gamma_k = (k - (n_detectors - 1) / 2) * detector_angular_pitch`` at the
source, and its ray travels in direction ``-(cos(beta + gamma_k),
sin(beta + gamma_k))``, so ``gamma = 0`` is the central ray through the
isocenter.  The image grid is centered on the isocenter; row index runs
along +y, column index along +x.

All distances are in mm and all angles in radians.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np

from .arrays import Sinogram
from .errors import ParameterError

__all__ = ["FanBeamGeometry", "ViewMask", "make_geometry", "apply_view_mask"]


@dataclass(frozen=True)
class FanBeamGeometry:
    """Equiangular fan-beam scan description bound to an image grid.

    Parameters
    ----------
    source_to_center : float
        Source-to-isocenter distance in mm.
    center_to_detector : float
        Isocenter-to-detector distance in mm.
    n_detectors : int
        Number of detector elements per view.
    detector_angular_pitch : float
        Angular spacing between neighboring detector elements, radians.
    n_views : int
        Number of views in a full scan.
    image_width, image_height : int
        Bound image grid size in pixels.
    pixel_size : float
        Image pixel edge length in mm.
    view_angles : ndarray, optional
        Strictly increasing view angles; defaults to ``2*pi*k / n_views``.
    """

    source_to_center: float
    center_to_detector: float
    n_detectors: int
    detector_angular_pitch: float
    n_views: int
    image_width: int
    image_height: int
    pixel_size: float
    view_angles: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.source_to_center <= 0 or self.center_to_detector <= 0:
            raise ParameterError("source_to_center and center_to_detector must be > 0")
        if self.n_detectors < 1 or self.n_views < 1:
            raise ParameterError("n_detectors and n_views must be >= 1")
        if self.detector_angular_pitch <= 0:
            raise ParameterError("detector_angular_pitch must be > 0")
        if self.image_width < 1 or self.image_height < 1 or self.pixel_size <= 0:
            raise ParameterError("image grid must have positive size and pixel_size")
        if self.view_angles is None:
            angles = 2.0 * np.pi * np.arange(self.n_views, dtype=np.float64) / self.n_views
        else:
            angles = np.array(self.view_angles, dtype=np.float64, copy=True)
            if angles.shape != (self.n_views,):
                raise ParameterError(
                    f"view_angles must have shape ({self.n_views},), got {angles.shape}"
                )
            if angles.shape[0] > 1 and not np.all(np.diff(angles) > 0):
                raise ParameterError("view_angles must be strictly increasing")
        angles.setflags(write=False)
        object.__setattr__(self, "view_angles", angles)
        # The source must stay outside the grid for ray clipping to make sense.
        grid_radius = 0.5 * self.pixel_size * math.hypot(self.image_width, self.image_height)
        if self.source_to_center <= grid_radius:
            raise ParameterError("source_to_center must exceed the grid circumradius")
        half_fan = 0.5 * self.n_detectors * self.detector_angular_pitch
        needed = math.asin(min(1.0, self.inscribed_radius / self.source_to_center))
        if half_fan < needed:
            warnings.warn(
                f"detector fan half-angle {half_fan:.4f} rad does not cover the "
                f"image inscribed circle (needs {needed:.4f} rad); edge pixels "
                "will be missing from some views",
                stacklevel=2,
            )

    @property
    def inscribed_radius(self) -> float:
        """Radius in mm of the circle inscribed in the image rectangle."""
        return 0.5 * self.pixel_size * min(self.image_width, self.image_height)

    @property
    def fan_angles(self) -> np.ndarray:
        """Per-element fan angles ``gamma_k``, centered on the central ray."""
        k = np.arange(self.n_detectors, dtype=np.float64)
        return (k - 0.5 * (self.n_detectors - 1)) * self.detector_angular_pitch

    def to_dict(self) -> dict[str, Any]:
        return {
            "source_to_center": float(self.source_to_center),
            "center_to_detector": float(self.center_to_detector),
            "n_detectors": int(self.n_detectors),
            "detector_angular_pitch": float(self.detector_angular_pitch),
            "n_views": int(self.n_views),
            "image_width": int(self.image_width),
            "image_height": int(self.image_height),
            "pixel_size": float(self.pixel_size),
            "view_angles": [float(a) for a in self.view_angles],
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "FanBeamGeometry":
        known = {
            "source_to_center",
            "center_to_detector",
            "n_detectors",
            "detector_angular_pitch",
            "n_views",
            "image_width",
            "image_height",
            "pixel_size",
            "view_angles",
        }
        unknown = set(data) - known
        if unknown:
            raise ParameterError(f"unknown geometry keys: {sorted(unknown)}")
        kwargs = dict(data)
        if "view_angles" in kwargs and kwargs["view_angles"] is not None:
            kwargs["view_angles"] = np.asarray(kwargs["view_angles"], dtype=np.float64)
        return cls(**kwargs)

    def to_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def from_json(cls, path: str | Path) -> "FanBeamGeometry":
        return cls.from_dict(json.loads(Path(path).read_text()))


def make_geometry(
    image_width: int,
    image_height: int,
    pixel_size: float = 1.0,
    n_views: int = 360,
    n_detectors: int | None = None,
    source_to_center: float = 550.0,
    center_to_detector: float = 400.0,
    detector_angular_pitch: float = 1.0 / 512.0,
    view_angles: np.ndarray | None = None,
) -> FanBeamGeometry:
    """Geometry with clinically plausible distances, detector count auto-sized.

    When ``n_detectors`` is omitted it is chosen odd (so the central ray is
    an exact detector) and wide enough to cover the inscribed circle with a
    10% angular margin.
    """
    if source_to_center <= 0 or detector_angular_pitch <= 0:
        raise ParameterError("source_to_center and detector_angular_pitch must be > 0")
    if n_detectors is None:
        r = 0.5 * pixel_size * min(image_width, image_height)
        half_needed = 1.1 * math.asin(min(1.0, r / source_to_center))
        n_detectors = 2 * math.ceil(half_needed / detector_angular_pitch) + 1
    return FanBeamGeometry(
        source_to_center=source_to_center,
        center_to_detector=center_to_detector,
        n_detectors=n_detectors,
        detector_angular_pitch=detector_angular_pitch,
        n_views=n_views,
        image_width=image_width,
        image_height=image_height,
        pixel_size=pixel_size,
        view_angles=view_angles,
    )


# ---- view masks ----


@dataclass(frozen=True)
class ViewMask:
    """Subset of view indices kept from a full scan.

    ``kept`` is strictly increasing and non-empty; indices refer to rows of
    the full sinogram / entries of ``geometry.view_angles``.
    """

    n_views: int
    kept: np.ndarray

    def __post_init__(self) -> None:
        kept = np.array(self.kept, dtype=np.int64, copy=True)
        if kept.ndim != 1 or kept.size == 0:
            raise ParameterError("mask must keep at least one view")
        if kept[0] < 0 or kept[-1] >= self.n_views or not np.all(np.diff(kept) > 0):
            raise ParameterError(
                f"kept indices must be strictly increasing within [0, {self.n_views})"
            )
        kept.setflags(write=False)
        object.__setattr__(self, "kept", kept)

    @property
    def n_kept(self) -> int:
        return int(self.kept.size)

    @classmethod
    def full(cls, n_views: int) -> "ViewMask":
        return cls(n_views, np.arange(n_views, dtype=np.int64))

    @classmethod
    def uniform(cls, n_views: int, keep: int) -> "ViewMask":
        """Keep ``keep`` views at uniform spacing: index ``rint(j * n_views / keep)``.

        Rounding is to nearest with ties to even.  ``keep`` must lie in
        ``[1, n_views]``.
        """
        if not 1 <= keep <= n_views:
            raise ParameterError(f"keep must be in [1, {n_views}], got {keep}")
        idx = np.rint(np.arange(keep, dtype=np.float64) * n_views / keep).astype(np.int64)
        return cls(n_views, idx)

    def to_dict(self) -> dict[str, Any]:
        return {"n_views": int(self.n_views), "kept": [int(i) for i in self.kept]}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ViewMask":
        return cls(int(data["n_views"]), np.asarray(data["kept"], dtype=np.int64))


def apply_view_mask(sino: Sinogram, mask: ViewMask) -> Sinogram:
    """Row subset of a full sinogram; kept rows are carried over bit-exactly."""
    if sino.n_views != mask.n_views:
        raise ParameterError(
            f"mask covers {mask.n_views} views but sinogram has {sino.n_views}"
        )
    return Sinogram(
        sino.values[mask.kept], sino.view_angles[mask.kept], unit=sino.unit
    )
