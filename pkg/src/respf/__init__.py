"""Sparse-view fan-beam CT reconstruction toolkit.

Provides a Siddon projector pair, filtered backprojection, an ASD-POCS
total-variation solver, and a Poisson-flow sampler with per-step data
consistency, plus phantom simulation, metrics, an on-disk array container,
and a subprocess denoiser bridge.
"""

from .arrays import (
    Image,
    Sinogram,
    load_array,
    normalize_window,
    save_array,
    write_pgm,
    write_png,
)
from .asdpocs import (
    AsdPocsConfig,
    SubsetPartition,
    asd_pocs_run,
    asd_step,
    data_residual_norm,
    make_subset_partition,
    pocs_sweep,
    tv_gradient,
    tv_norm,
)
from .bridge import PROTOCOL_VERSION, RemoteDenoiser, serve_denoiser, serve_stdio
from .errors import (
    ArrayFileError,
    BadMagicError,
    BridgeError,
    BridgeTimeoutError,
    ConfigError,
    NonFiniteValueError,
    NumericalError,
    ParameterError,
    ProtocolError,
    RemoteDenoiserError,
    RespfError,
    ShapeMismatchError,
    TruncatedFileError,
    VersionMismatchError,
)
from .fbp import FbpConfig, fbp_reconstruct, ramp_filter_rows
from .flow import (
    INFINITE_D,
    ChargeSet,
    DenoiserModel,
    ExactEmpiricalDenoiser,
    NoiseSchedule,
    charge_weights,
    dump_trajectory,
    exact_denoise,
    heun_step,
    hijack_init,
    make_schedule,
    perturb_spherical,
    sample_trajectory,
)
from .geometry import FanBeamGeometry, ViewMask, apply_view_mask, make_geometry
from .metrics import MetricReport, local_ssim, nps, psnr, ssim
from .phantoms import (
    DatasetCase,
    DatasetManifest,
    Ellipse,
    NoiseModel,
    PhantomSpec,
    gen_random_phantom_corpus,
    make_sparse_case,
    rasterize_phantom,
    shepp_logan_spec,
    simulate_sinogram,
)
from .pipeline import (
    ResPFConfig,
    ResPFResult,
    StepLogRow,
    fuse_residual,
    respf_reconstruct,
    write_step_log,
)
from .projector import back_project, forward_project, masked_adjoint, masked_forward

__version__ = "0.1.0"
