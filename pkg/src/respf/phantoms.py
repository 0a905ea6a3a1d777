"""Phantom generation, sinogram simulation with noise, and dataset manifests.

Phantoms are sums of rotated ellipses evaluated at pixel centers and
clamped to be nonnegative, which makes nested structures (negative inner
intensities) safe.  Simulated measurements follow the post-log model:
optional Gaussian noise per bin, or Poisson counting noise
``y' = -ln(max(Poisson(I0 * exp(-y)), floor) / I0)``.  Noise is always
applied to the full sinogram before view masking, so kept rows of a
sparse case match the full sinogram bit for bit.

A dataset case bundles the phantom, full and masked sinograms (array
files on disk), the view mask, geometry, and noise description into a
JSON manifest; the schema is documented in ``docs/file_formats.md``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .arrays import Image, Sinogram, load_array, save_array
from .errors import ArrayFileError, ParameterError
from .geometry import FanBeamGeometry, ViewMask, apply_view_mask
from .projector import forward_project

__all__ = [
    "Ellipse",
    "PhantomSpec",
    "NoiseModel",
    "DatasetCase",
    "DatasetManifest",
    "rasterize_phantom",
    "shepp_logan_spec",
    "simulate_sinogram",
    "make_sparse_case",
    "gen_random_phantom_corpus",
]

MANIFEST_SCHEMA = "respf-dataset-manifest-v1"


@dataclass(frozen=True)
class Ellipse:
    """One additive ellipse: center/semi-axes in mm, rotation in radians."""

    center_x: float
    center_y: float
    semi_axis_x: float
    semi_axis_y: float
    rotation: float = 0.0
    intensity: float = 1.0

    def __post_init__(self) -> None:
        params = (
            self.center_x,
            self.center_y,
            self.semi_axis_x,
            self.semi_axis_y,
            self.rotation,
            self.intensity,
        )
        if not all(math.isfinite(p) for p in params):
            raise ParameterError(f"ellipse parameters must be finite, got {params}")
        if self.semi_axis_x <= 0 or self.semi_axis_y <= 0:
            raise ParameterError(
                f"semi-axes must be > 0, got {self.semi_axis_x}, {self.semi_axis_y}"
            )

    def to_dict(self) -> dict:
        return {
            "center_x": self.center_x,
            "center_y": self.center_y,
            "semi_axis_x": self.semi_axis_x,
            "semi_axis_y": self.semi_axis_y,
            "rotation": self.rotation,
            "intensity": self.intensity,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Ellipse":
        return cls(**d)


@dataclass(frozen=True)
class PhantomSpec:
    """Ellipse list bound to a pixel grid."""

    ellipses: tuple[Ellipse, ...]
    width: int
    height: int
    pixel_size: float = 1.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "ellipses", tuple(self.ellipses))
        if self.width < 1 or self.height < 1:
            raise ParameterError(f"grid must be at least 1x1, got {self.width}x{self.height}")
        if not (math.isfinite(self.pixel_size) and self.pixel_size > 0):
            raise ParameterError(f"pixel_size must be > 0, got {self.pixel_size}")

    def to_dict(self) -> dict:
        return {
            "ellipses": [e.to_dict() for e in self.ellipses],
            "width": self.width,
            "height": self.height,
            "pixel_size": self.pixel_size,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        extra = set(d) - {"ellipses", "width", "height", "pixel_size"}
        if extra:
            raise ParameterError(f"unknown phantom spec keys: {sorted(extra)}")
        return cls(
            ellipses=tuple(Ellipse.from_dict(e) for e in d["ellipses"]),
            width=int(d["width"]),
            height=int(d["height"]),
            pixel_size=float(d.get("pixel_size", 1.0)),
        )


def rasterize_phantom(spec: PhantomSpec) -> Image:
    """Sum ellipse intensities at pixel centers, clamped at zero."""
    xs = (np.arange(spec.width, dtype=np.float64) + 0.5 - spec.width / 2.0) * spec.pixel_size
    ys = (np.arange(spec.height, dtype=np.float64) + 0.5 - spec.height / 2.0) * spec.pixel_size
    xx, yy = np.meshgrid(xs, ys)
    vals = np.zeros((spec.height, spec.width), dtype=np.float64)
    for e in spec.ellipses:
        dx = xx - e.center_x
        dy = yy - e.center_y
        c, s = math.cos(e.rotation), math.sin(e.rotation)
        xr = dx * c + dy * s
        yr = -dx * s + dy * c
        inside = (xr / e.semi_axis_x) ** 2 + (yr / e.semi_axis_y) ** 2 <= 1.0
        vals += np.where(inside, e.intensity, 0.0)
    return Image(np.maximum(vals, 0.0), pixel_size=spec.pixel_size)


# Standard head-phantom table: (a, b, x0, y0, rotation deg, intensity) in a
# unit disk; scaled to the inscribed circle of the target grid.
_SHEPP_LOGAN_TABLE = (
    (0.69, 0.92, 0.0, 0.0, 0.0, 2.0),
    (0.6624, 0.8740, 0.0, -0.0184, 0.0, -0.98),
    (0.11, 0.31, 0.22, 0.0, -18.0, -0.02),
    (0.16, 0.41, -0.22, 0.0, 18.0, -0.02),
    (0.21, 0.25, 0.0, 0.35, 0.0, 0.01),
    (0.046, 0.046, 0.0, 0.1, 0.0, 0.01),
    (0.046, 0.046, 0.0, -0.1, 0.0, 0.01),
    (0.046, 0.023, -0.08, -0.605, 0.0, 0.01),
    (0.023, 0.023, 0.0, -0.606, 0.0, 0.01),
    (0.023, 0.046, 0.06, -0.605, 0.0, 0.01),
)


def shepp_logan_spec(size: int, pixel_size: float = 1.0) -> PhantomSpec:
    """Classic head phantom scaled to the inscribed circle of a square grid."""
    scale = size * pixel_size / 2.0
    ellipses = tuple(
        Ellipse(
            center_x=x0 * scale,
            center_y=y0 * scale,
            semi_axis_x=a * scale,
            semi_axis_y=b * scale,
            rotation=math.radians(phi),
            intensity=rho,
        )
        for a, b, x0, y0, phi, rho in _SHEPP_LOGAN_TABLE
    )
    return PhantomSpec(ellipses=ellipses, width=size, height=size, pixel_size=pixel_size)


@dataclass(frozen=True)
class NoiseModel:
    """Post-log measurement noise.

    ``gaussian`` adds N(0, sigma_g^2) per bin.  ``poisson`` draws transmission
    counts at flux ``i0`` and relogs them; counts below ``count_floor`` are
    clamped so the log stays finite.
    """

    kind: str = "none"
    sigma_g: float = 0.0
    i0: float = 1e6
    count_floor: float = 1.0

    def __post_init__(self) -> None:
        if self.kind not in ("none", "gaussian", "poisson"):
            raise ParameterError(f"noise kind must be none|gaussian|poisson, got {self.kind!r}")
        if self.sigma_g < 0:
            raise ParameterError(f"sigma_g must be >= 0, got {self.sigma_g}")
        if not self.i0 > 0:
            raise ParameterError(f"i0 must be > 0, got {self.i0}")
        if not self.count_floor > 0:
            raise ParameterError(f"count_floor must be > 0, got {self.count_floor}")

    @classmethod
    def none(cls) -> "NoiseModel":
        return cls(kind="none")

    @classmethod
    def gaussian(cls, sigma_g: float) -> "NoiseModel":
        return cls(kind="gaussian", sigma_g=sigma_g)

    @classmethod
    def poisson(cls, i0: float, count_floor: float = 1.0) -> "NoiseModel":
        return cls(kind="poisson", i0=i0, count_floor=count_floor)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "sigma_g": self.sigma_g,
            "i0": self.i0,
            "count_floor": self.count_floor,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseModel":
        extra = set(d) - {"kind", "sigma_g", "i0", "count_floor"}
        if extra:
            raise ParameterError(f"unknown noise keys: {sorted(extra)}")
        return cls(**d)


def simulate_sinogram(
    img: Image,
    geom: FanBeamGeometry,
    noise: NoiseModel | None = None,
    rng_seed: int = 0,
) -> Sinogram:
    """Forward-project and apply the noise model (full view set)."""
    noise = noise or NoiseModel.none()
    sino = forward_project(img, geom)
    if noise.kind == "none" or (noise.kind == "gaussian" and noise.sigma_g == 0.0):
        return sino
    rng = np.random.default_rng(rng_seed)
    y = sino.values.astype(np.float64)
    if noise.kind == "gaussian":
        noisy = y + rng.normal(0.0, noise.sigma_g, size=y.shape)
    else:
        counts = rng.poisson(noise.i0 * np.exp(-y)).astype(np.float64)
        counts = np.maximum(counts, noise.count_floor)
        noisy = math.log(noise.i0) - np.log(counts)
    return sino.with_values(noisy)


@dataclass(frozen=True)
class DatasetCase:
    """One manifest entry; paths are relative to the manifest file."""

    case_id: str
    phantom: str
    full_sinogram: str
    masked_sinogram: str
    mask: ViewMask
    geometry: FanBeamGeometry
    noise: NoiseModel
    split: str = "test"
    rng_seed: int = 0

    def to_dict(self) -> dict:
        return {
            "case_id": self.case_id,
            "phantom": self.phantom,
            "full_sinogram": self.full_sinogram,
            "masked_sinogram": self.masked_sinogram,
            "mask": self.mask.to_dict(),
            "geometry": self.geometry.to_dict(),
            "noise": self.noise.to_dict(),
            "split": self.split,
            "rng_seed": self.rng_seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetCase":
        extra = set(d) - {
            "case_id",
            "phantom",
            "full_sinogram",
            "masked_sinogram",
            "mask",
            "geometry",
            "noise",
            "split",
            "rng_seed",
        }
        if extra:
            raise ParameterError(f"unknown dataset case keys: {sorted(extra)}")
        return cls(
            case_id=str(d["case_id"]),
            phantom=str(d["phantom"]),
            full_sinogram=str(d["full_sinogram"]),
            masked_sinogram=str(d["masked_sinogram"]),
            mask=ViewMask.from_dict(d["mask"]),
            geometry=FanBeamGeometry.from_dict(d["geometry"]),
            noise=NoiseModel.from_dict(d["noise"]),
            split=str(d.get("split", "test")),
            rng_seed=int(d.get("rng_seed", 0)),
        )


@dataclass(frozen=True)
class DatasetManifest:
    """Collection of dataset cases, serializable to a single JSON file."""

    cases: tuple[DatasetCase, ...] = field(default_factory=tuple)

    def __post_init__(self) -> None:
        object.__setattr__(self, "cases", tuple(self.cases))
        ids = [c.case_id for c in self.cases]
        if len(set(ids)) != len(ids):
            raise ParameterError("case_id values must be unique within a manifest")

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        payload = {"schema": MANIFEST_SCHEMA, "cases": [c.to_dict() for c in self.cases]}
        path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path: str | Path, check_files: bool = True) -> "DatasetManifest":
        path = Path(path)
        payload = json.loads(path.read_text())
        if payload.get("schema") != MANIFEST_SCHEMA:
            raise ParameterError(
                f"unsupported manifest schema {payload.get('schema')!r}; expected {MANIFEST_SCHEMA!r}"
            )
        manifest = cls(cases=tuple(DatasetCase.from_dict(d) for d in payload["cases"]))
        if check_files:
            root = path.parent
            for case in manifest.cases:
                for rel in (case.phantom, case.full_sinogram, case.masked_sinogram):
                    target = root / rel
                    if not target.exists():
                        raise ArrayFileError(f"manifest references missing file {target}")
                    load_array(target)
        return manifest


def make_sparse_case(
    img: Image,
    geom: FanBeamGeometry,
    keep: int,
    noise: NoiseModel | None = None,
    rng_seed: int = 0,
    out_dir: str | Path = ".",
    case_id: str = "case",
    split: str = "test",
) -> DatasetCase:
    """Simulate, mask, and write one dataset case.

    Writes ``{case_id}_phantom.rspf``, ``{case_id}_full.rspf``,
    ``{case_id}_sparse.rspf``, and ``{case_id}_mask.json`` under
    ``out_dir``; noise is applied before masking.
    """
    noise = noise or NoiseModel.none()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    full = simulate_sinogram(img, geom, noise, rng_seed)
    mask = ViewMask.uniform(geom.n_views, keep)
    sparse = apply_view_mask(full, mask)
    phantom_name = f"{case_id}_phantom.rspf"
    full_name = f"{case_id}_full.rspf"
    sparse_name = f"{case_id}_sparse.rspf"
    save_array(out / phantom_name, img)
    save_array(out / full_name, full)
    save_array(out / sparse_name, sparse)
    (out / f"{case_id}_mask.json").write_text(
        json.dumps(mask.to_dict(), sort_keys=True) + "\n"
    )
    return DatasetCase(
        case_id=case_id,
        phantom=phantom_name,
        full_sinogram=full_name,
        masked_sinogram=sparse_name,
        mask=mask,
        geometry=geom,
        noise=noise,
        split=split,
        rng_seed=rng_seed,
    )


def gen_random_phantom_corpus(
    n: int,
    seed: int,
    width: int = 64,
    height: int = 64,
    pixel_size: float = 1.0,
) -> list[PhantomSpec]:
    """Reproducible nested-ellipse phantoms whose rasterized range stays in [0, 1].

    Each phantom is a soft-tissue body ellipse plus 2-5 inner ellipses of
    mixed sign.  Positive intensities are budgeted so their total never
    exceeds 1; negatives are harmless because rasterization clamps at 0.
    """
    if n < 1:
        raise ParameterError(f"n must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    half = min(width, height) * pixel_size / 2.0
    specs: list[PhantomSpec] = []
    for _ in range(n):
        body_intensity = float(rng.uniform(0.35, 0.6))
        body = Ellipse(
            center_x=float(rng.uniform(-0.08, 0.08) * half),
            center_y=float(rng.uniform(-0.08, 0.08) * half),
            semi_axis_x=float(rng.uniform(0.55, 0.8) * half),
            semi_axis_y=float(rng.uniform(0.55, 0.8) * half),
            rotation=float(rng.uniform(0.0, math.pi)),
            intensity=body_intensity,
        )
        n_inner = int(rng.integers(2, 6))
        raw = rng.uniform(-0.15, 0.15, size=n_inner)
        positive_total = float(raw[raw > 0].sum())
        budget = 1.0 - body_intensity
        if positive_total > budget:
            raw[raw > 0] *= (budget / positive_total) * (1.0 - 1e-9)
        inner = [
            Ellipse(
                center_x=float(rng.uniform(-0.35, 0.35) * half),
                center_y=float(rng.uniform(-0.35, 0.35) * half),
                semi_axis_x=float(rng.uniform(0.05, 0.3) * half),
                semi_axis_y=float(rng.uniform(0.05, 0.3) * half),
                rotation=float(rng.uniform(0.0, math.pi)),
                intensity=float(raw[k]),
            )
            for k in range(n_inner)
        ]
        specs.append(
            PhantomSpec(
                ellipses=(body, *inner),
                width=width,
                height=height,
                pixel_size=pixel_size,
            )
        )
    return specs
