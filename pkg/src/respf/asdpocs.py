"""Total-variation minimization with data consistency (ASD-POCS).

The solver alternates two phases per outer iteration:

* POCS phase: one SART sweep over ordered view subsets,
  ``x <- x + mu_k * D_c^-1 A_sub^T W (y_sub - A_sub x)`` with ``W`` the
  per-ray row normalization by total intersection length and ``D_c`` the
  per-pixel column sums of the subset operator, followed by an optional
  nonnegativity clamp.  The joint normalization is what keeps the sweep
  contractive for relaxations up to 2 at any subset size.
* Adaptive steepest descent phase: a fixed number of normalized TV
  gradient steps whose length is coupled to the magnitude of the POCS
  update of the same iteration (``eta_k = tv_step_scale * ||dx_pocs||``),
  so the two phases stay balanced as the solve settles.

Both the relaxation ``mu_k`` and the TV step scale decay geometrically
per iteration.  The anisotropy-free TV norm is the sum over pixels of
``sqrt(dv^2 + dh^2)`` with one-sided differences (first row/column have
no vertical/horizontal difference); the smoothed variant replaces each
term by ``sqrt(dv^2 + dh^2 + eps^2) - eps`` so the gradient exists
everywhere.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .arrays import Image, Sinogram
from .errors import ParameterError
from .geometry import FanBeamGeometry, ViewMask
from .projector import masked_adjoint, masked_forward

__all__ = [
    "AsdPocsConfig",
    "SubsetPartition",
    "make_subset_partition",
    "tv_norm",
    "tv_gradient",
    "asd_step",
    "pocs_sweep",
    "asd_pocs_run",
    "data_residual_norm",
]


# ---- total variation ----


def _as_f64(x: Image | np.ndarray) -> np.ndarray:
    if isinstance(x, Image):
        return x.as_float64()
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ParameterError(f"TV expects a 2-D array, got shape {arr.shape}")
    return arr


def _tv_terms(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    dv = np.zeros_like(a)
    dh = np.zeros_like(a)
    dv[1:, :] = a[1:, :] - a[:-1, :]
    dh[:, 1:] = a[:, 1:] - a[:, :-1]
    return dv, dh


def tv_norm(x: Image | np.ndarray, eps: float = 0.0) -> float:
    """Isotropic total variation; smoothed per-term when ``eps > 0``.

    With ``eps = 0`` this is ``sum sqrt(dv^2 + dh^2)``; otherwise each term
    is ``sqrt(dv^2 + dh^2 + eps^2) - eps``, which lower-bounds the exact
    value and converges to it as ``eps -> 0``.
    """
    if eps < 0:
        raise ParameterError(f"eps must be >= 0, got {eps}")
    dv, dh = _tv_terms(_as_f64(x))
    if eps == 0.0:
        return float(np.sum(np.hypot(dv, dh)))
    return float(np.sum(np.sqrt(dv * dv + dh * dh + eps * eps) - eps))


def tv_gradient(x: Image | np.ndarray, eps: float = 0.0) -> np.ndarray:
    """Exact gradient of :func:`tv_norm` as a float64 array.

    At ``eps = 0`` the norm is non-differentiable where both local
    differences vanish; those entries get subgradient 0.
    """
    if eps < 0:
        raise ParameterError(f"eps must be >= 0, got {eps}")
    a = _as_f64(x)
    dv, dh = _tv_terms(a)
    r = np.sqrt(dv * dv + dh * dh + eps * eps)
    safe = np.where(r > 0.0, r, 1.0)
    grad = (dv + dh) / safe
    grad[:-1, :] -= dv[1:, :] / safe[1:, :]
    grad[:, :-1] -= dh[:, 1:] / safe[:, 1:]
    return grad


def asd_step(x: Image, step_size: float, eps: float = 0.0) -> Image:
    """One normalized-direction TV descent step ``x - step * g / ||g||``.

    A zero gradient (e.g. constant image) returns ``x`` unchanged.
    """
    if step_size < 0:
        raise ParameterError(f"step_size must be >= 0, got {step_size}")
    grad = tv_gradient(x, eps)
    norm = float(np.linalg.norm(grad))
    if norm == 0.0 or step_size == 0.0:
        return x
    return x.with_values(x.as_float64() - (step_size / norm) * grad)


# ---- subsets and sweeps ----


@dataclass(frozen=True)
class SubsetPartition:
    """Ordered disjoint groups of kept-view positions (rows of the sparse sinogram)."""

    mask: ViewMask
    groups: tuple[np.ndarray, ...]

    def __post_init__(self) -> None:
        seen = np.concatenate([np.asarray(g) for g in self.groups]) if self.groups else np.array([])
        if len(self.groups) == 0:
            raise ParameterError("partition needs at least one non-empty group")
        if sorted(seen.tolist()) != list(range(self.mask.n_kept)):
            raise ParameterError("groups must disjointly cover all kept-view positions")

    @property
    def n_groups(self) -> int:
        return len(self.groups)

    def group_mask(self, g: int) -> ViewMask:
        """Absolute-view mask of group ``g`` for projector calls."""
        return ViewMask(self.mask.n_views, self.mask.kept[self.groups[g]])


def make_subset_partition(mask: ViewMask, n_subsets: int) -> SubsetPartition:
    """Interleaved assignment: group ``j`` takes kept positions ``j, j+n, ...``.

    Groups that would be empty (``n_subsets > n_kept``) are dropped with a
    warning; the effective subset count is then ``n_kept``.
    """
    if n_subsets < 1:
        raise ParameterError(f"n_subsets must be >= 1, got {n_subsets}")
    groups = []
    dropped = 0
    for j in range(n_subsets):
        pos = np.arange(j, mask.n_kept, n_subsets, dtype=np.int64)
        if pos.size:
            groups.append(pos)
        else:
            dropped += 1
    if dropped:
        warnings.warn(
            f"{dropped} of {n_subsets} subsets are empty for {mask.n_kept} kept views "
            "and were dropped",
            stacklevel=2,
        )
    return SubsetPartition(mask=mask, groups=tuple(groups))


def _check_sparse_sinogram(y_sp: Sinogram, geom: FanBeamGeometry, mask: ViewMask) -> None:
    if mask.n_views != geom.n_views:
        raise ParameterError(f"mask covers {mask.n_views} views, geometry has {geom.n_views}")
    if y_sp.n_views != mask.n_kept or y_sp.n_detectors != geom.n_detectors:
        raise ParameterError(
            f"sparse sinogram shape {y_sp.values.shape} does not match "
            f"({mask.n_kept}, {geom.n_detectors})"
        )


def data_residual_norm(x: Image, y_sp: Sinogram, geom: FanBeamGeometry, mask: ViewMask) -> float:
    """``||A_mask x - y_sp||_2`` in float64."""
    _check_sparse_sinogram(y_sp, geom, mask)
    proj = masked_forward(x, geom, mask).values.astype(np.float64)
    return float(np.linalg.norm(proj - y_sp.values.astype(np.float64)))


def _sart_weights(geom: FanBeamGeometry, group_mask: ViewMask) -> tuple[np.ndarray, np.ndarray]:
    """SART normalizers for one subset.

    Returns ``(row_inv, col_inv)``: 1 over the per-ray intersection length
    (rays missing the grid weigh 0) and 1 over the per-pixel column sums
    (pixels unseen by the subset weigh 0).
    """
    ones_img = Image(np.ones((geom.image_height, geom.image_width)), pixel_size=geom.pixel_size)
    lengths = masked_forward(ones_img, geom, group_mask).values.astype(np.float64)
    row_inv = np.where(lengths > 1e-12, 1.0 / np.where(lengths > 1e-12, lengths, 1.0), 0.0)
    ones_sino = Sinogram(np.ones_like(lengths), geom.view_angles[group_mask.kept])
    col = masked_adjoint(ones_sino, geom, group_mask).as_float64()
    col_inv = np.where(col > 1e-12, 1.0 / np.where(col > 1e-12, col, 1.0), 0.0)
    return row_inv, col_inv


def pocs_sweep(
    x: Image,
    y_sp: Sinogram,
    geom: FanBeamGeometry,
    mask: ViewMask,
    partition: SubsetPartition,
    relaxation: float,
    clamp: bool = True,
    sart_weights: list[tuple[np.ndarray, np.ndarray]] | None = None,
) -> Image:
    """One ordered pass of relaxed SART updates over all subsets.

    ``sart_weights`` may carry precomputed per-group (row, column)
    normalizers (as produced inside :func:`asd_pocs_run`) to avoid
    recomputing them on every sweep; when omitted they are derived on the
    fly.
    """
    _check_sparse_sinogram(y_sp, geom, mask)
    if not 0.0 < relaxation <= 2.0:
        raise ParameterError(f"relaxation must be in (0, 2], got {relaxation}")
    y64 = y_sp.values.astype(np.float64)
    for g in range(partition.n_groups):
        gmask = partition.group_mask(g)
        row_inv, col_inv = (
            sart_weights[g] if sart_weights is not None else _sart_weights(geom, gmask)
        )
        proj = masked_forward(x, geom, gmask).values.astype(np.float64)
        resid = (y64[partition.groups[g]] - proj) * row_inv
        update = masked_adjoint(
            Sinogram(resid, geom.view_angles[gmask.kept]), geom, gmask
        ).as_float64()
        x = x.with_values(x.as_float64() + relaxation * col_inv * update)
    if clamp:
        x = x.with_values(np.maximum(x.values, 0.0))
    return x


# ---- outer solver ----


@dataclass(frozen=True)
class AsdPocsConfig:
    """Outer-loop schedule for the alternating solver.

    Parameters
    ----------
    n_iterations : int
        Outer iterations; 0 returns the (clamped) initializer.
    n_subsets : int
        Ordered-subset count for the POCS phase.
    tv_steps_per_iteration : int
        Normalized TV descent steps after each sweep.
    pocs_relaxation : float
        Initial relaxation ``mu_0`` in (0, 2].
    relaxation_decay : float
        Geometric decay of ``mu_k`` per iteration.
    tv_step_scale : float
        ``eta_k`` as a fraction of the POCS update magnitude.
    tv_step_decay : float
        Geometric decay of that fraction per iteration.
    tv_epsilon : float or None
        TV smoothing constant; None resolves to 1e-6 times the dynamic
        range of the initializer (1e-6 if the initializer is constant).
    data_tolerance : float or None
        Early-stop threshold on ``||A_mask x - y_sp||``; None disables
        the check entirely.
    enforce_nonnegativity : bool
        Apply the nonnegativity projection in the POCS phase and to the
        returned iterate.
    """

    n_iterations: int = 10
    n_subsets: int = 8
    tv_steps_per_iteration: int = 5
    pocs_relaxation: float = 1.0
    relaxation_decay: float = 0.99
    tv_step_scale: float = 0.2
    tv_step_decay: float = 0.97
    tv_epsilon: float | None = None
    data_tolerance: float | None = None
    enforce_nonnegativity: bool = True

    def __post_init__(self) -> None:
        if self.n_iterations < 0 or self.n_subsets < 1 or self.tv_steps_per_iteration < 0:
            raise ParameterError("iteration/subset/step counts must be nonnegative (subsets >= 1)")
        if not 0.0 < self.pocs_relaxation <= 2.0:
            raise ParameterError(f"pocs_relaxation must be in (0, 2], got {self.pocs_relaxation}")
        if not 0.0 < self.relaxation_decay <= 1.0 or not 0.0 < self.tv_step_decay <= 1.0:
            raise ParameterError("decay factors must be in (0, 1]")
        if self.tv_step_scale < 0:
            raise ParameterError(f"tv_step_scale must be >= 0, got {self.tv_step_scale}")
        if self.tv_epsilon is not None and not self.tv_epsilon > 0:
            raise ParameterError(f"tv_epsilon must be > 0 when given, got {self.tv_epsilon}")
        if self.data_tolerance is not None and self.data_tolerance < 0:
            raise ParameterError(f"data_tolerance must be >= 0, got {self.data_tolerance}")


def _resolve_tv_epsilon(cfg: AsdPocsConfig, x0: Image) -> float:
    if cfg.tv_epsilon is not None:
        return float(cfg.tv_epsilon)
    span = float(x0.values.max() - x0.values.min())
    return 1e-6 * (span if span > 0.0 else 1.0)


def asd_pocs_run(
    x0: Image,
    y_sp: Sinogram,
    geom: FanBeamGeometry,
    mask: ViewMask,
    cfg: AsdPocsConfig | None = None,
) -> Image:
    """Run the alternating solver from ``x0``; inputs are left untouched."""
    cfg = cfg or AsdPocsConfig()
    _check_sparse_sinogram(y_sp, geom, mask)
    eps = _resolve_tv_epsilon(cfg, x0)
    x = x0.with_values(np.maximum(x0.values, 0.0)) if cfg.enforce_nonnegativity else x0
    if cfg.n_iterations == 0:
        return x
    partition = make_subset_partition(mask, cfg.n_subsets)
    weights = [_sart_weights(geom, partition.group_mask(g)) for g in range(partition.n_groups)]
    mu = cfg.pocs_relaxation
    scale = cfg.tv_step_scale
    for _ in range(cfg.n_iterations):
        if cfg.data_tolerance is not None:
            if data_residual_norm(x, y_sp, geom, mask) <= cfg.data_tolerance:
                break
        before = x.as_float64()
        x = pocs_sweep(
            x, y_sp, geom, mask, partition, mu,
            clamp=cfg.enforce_nonnegativity, sart_weights=weights,
        )
        pocs_magnitude = float(np.linalg.norm(x.as_float64() - before))
        eta = scale * pocs_magnitude
        for _ in range(cfg.tv_steps_per_iteration):
            x = asd_step(x, eta, eps)
        mu *= cfg.relaxation_decay
        scale *= cfg.tv_step_decay
    if cfg.enforce_nonnegativity:
        x = x.with_values(np.maximum(x.values, 0.0))
    return x
