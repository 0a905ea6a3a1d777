"""Command-line interface.

Subcommands cover the full workflow: ``phantom`` (generate images),
``simulate`` (sinogram + sparse case + manifest), ``recon`` (FBP,
ASD-POCS, or the hybrid sampling pipeline), ``eval`` (metrics between two
images), ``sweep-alpha`` (fusion-coefficient grid), and ``field-demo``
(2-D trajectory CSV of the exact empirical field).

Configuration precedence is flags > ``--config`` JSON file > built-in
defaults; unknown keys anywhere in the file are rejected before any
compute starts.  Exit codes: 0 success, 2 configuration error, 3 I/O
error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import shlex
import sys
from pathlib import Path

import numpy as np

from .arrays import Image, Sinogram, load_array, normalize_window, save_array, write_png
from .asdpocs import AsdPocsConfig, asd_pocs_run
from .errors import (
    ArrayFileError,
    BridgeError,
    ConfigError,
    NumericalError,
    ParameterError,
    RespfError,
)
from .fbp import FbpConfig, fbp_reconstruct
from .flow import (
    INFINITE_D,
    ChargeSet,
    ExactEmpiricalDenoiser,
    NoiseSchedule,
    make_schedule,
    sample_trajectory,
)
from .geometry import FanBeamGeometry, make_geometry
from .metrics import nps, psnr, ssim
from .phantoms import (
    DatasetCase,
    DatasetManifest,
    NoiseModel,
    gen_random_phantom_corpus,
    make_sparse_case,
    rasterize_phantom,
    shepp_logan_spec,
)
from .pipeline import ResPFConfig, respf_reconstruct, write_step_log

__all__ = ["main", "build_parser"]

_CONFIG_SECTIONS = {
    "schedule": {"sigma_max", "sigma_min", "rho", "n_steps"},
    "respf": {"hijack_index", "fusion_alpha", "fusion_convention", "rng_seed"},
    "asdpocs": {
        "n_iterations",
        "n_subsets",
        "tv_steps_per_iteration",
        "pocs_relaxation",
        "relaxation_decay",
        "tv_step_scale",
        "tv_step_decay",
        "tv_epsilon",
        "data_tolerance",
        "enforce_nonnegativity",
    },
    "fbp": {"filter_name", "frequency_cutoff", "interpolation"},
}


def load_run_config(path: str | Path | None) -> dict:
    """Load and validate the optional JSON config file."""
    if path is None:
        return {}
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as err:
        raise ArrayFileError(f"cannot read config file {path}: {err}") from err
    except json.JSONDecodeError as err:
        raise ConfigError(f"config file {path} is not valid JSON: {err}") from err
    if not isinstance(raw, dict):
        raise ConfigError("config file must contain a JSON object")
    unknown = set(raw) - set(_CONFIG_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    for section, keys in _CONFIG_SECTIONS.items():
        body = raw.get(section, {})
        if not isinstance(body, dict):
            raise ConfigError(f"config section {section!r} must be an object")
        extra = set(body) - keys
        if extra:
            raise ConfigError(f"unknown keys in config section {section!r}: {sorted(extra)}")
    return raw


def _merged(section: dict, overrides: dict) -> dict:
    out = dict(section)
    out.update({k: v for k, v in overrides.items() if v is not None})
    return out


def _build_schedule(cfg: dict, args) -> NoiseSchedule:
    merged = _merged(cfg.get("schedule", {}), {"n_steps": getattr(args, "n_steps", None)})
    return make_schedule(**merged)


def _build_fbp_config(cfg: dict, args) -> FbpConfig:
    merged = _merged(
        cfg.get("fbp", {}),
        {
            "filter_name": getattr(args, "filter", None),
            "frequency_cutoff": getattr(args, "cutoff", None),
        },
    )
    return FbpConfig(**merged)


def _build_asdpocs_config(cfg: dict, args) -> AsdPocsConfig:
    merged = _merged(
        cfg.get("asdpocs", {}),
        {
            "n_iterations": getattr(args, "dc_iterations", None),
            "n_subsets": getattr(args, "dc_subsets", None),
        },
    )
    return AsdPocsConfig(**merged)


def _build_respf_config(cfg: dict, args) -> ResPFConfig:
    merged = _merged(
        cfg.get("respf", {}),
        {
            "hijack_index": getattr(args, "tau", None),
            "fusion_alpha": getattr(args, "alpha", None),
            "fusion_convention": getattr(args, "fusion_convention", None),
            "rng_seed": getattr(args, "seed", None),
        },
    )
    return ResPFConfig(
        schedule=_build_schedule(cfg, args),
        dc_config=_build_asdpocs_config(cfg, args),
        fbp_config=_build_fbp_config(cfg, args),
        denoiser_source=getattr(args, "denoiser", None) or "exact",
        **merged,
    )


def _load_charges(args) -> ChargeSet:
    if not args.charges:
        raise ConfigError("--charges DIR is required for the exact denoiser")
    paths = sorted(Path(args.charges).glob("*.rspf"))
    if not paths:
        raise ConfigError(f"no .rspf charge files under {args.charges}")
    charges = []
    for p in paths:
        obj = load_array(p)
        if not isinstance(obj, Image):
            raise ConfigError(f"charge file {p} does not hold an image")
        charges.append(obj)
    d = INFINITE_D if math.isinf(args.charge_d) else float(args.charge_d)
    return ChargeSet(tuple(charges), D=d)


def _make_denoiser(args):
    from .bridge import RemoteDenoiser

    if getattr(args, "denoiser", "exact") == "exact":
        return ExactEmpiricalDenoiser(_load_charges(args)), None
    if args.server:
        remote = RemoteDenoiser.spawn(shlex.split(args.server), timeout=args.bridge_timeout)
    elif args.tcp:
        host, _, port = args.tcp.rpartition(":")
        remote = RemoteDenoiser.connect_tcp(host, int(port), timeout=args.bridge_timeout)
    else:
        raise ConfigError("remote denoiser needs --server CMD or --tcp HOST:PORT")
    return remote, remote


def _write_image_outputs(img: Image, out_dir: Path, stem: str, window: tuple | None) -> None:
    save_array(out_dir / f"{stem}.rspf", img)
    lo, hi = window if window else (float(img.values.min()), float(img.values.max()))
    if hi <= lo:
        hi = lo + 1.0
    write_png(out_dir / f"{stem}.png", normalize_window(img, lo, hi))


def _write_metrics_csv(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["case_id", "method", "views", "psnr", "ssim", "lpips"])
        for row in rows:
            writer.writerow(
                [
                    row["case_id"],
                    row["method"],
                    row["views"],
                    repr(row["psnr"]),
                    repr(row["ssim"]),
                    "n/a",
                ]
            )


def _select_case(manifest: DatasetManifest, case_id: str | None) -> DatasetCase:
    if case_id is None:
        return manifest.cases[0]
    for case in manifest.cases:
        if case.case_id == case_id:
            return case
    raise ConfigError(f"case {case_id!r} not found in manifest")


def _load_case_arrays(manifest_path: Path, case: DatasetCase):
    root = manifest_path.parent
    reference = load_array(root / case.phantom)
    sparse = load_array(root / case.masked_sinogram)
    if not isinstance(sparse, Sinogram):
        raise ArrayFileError(f"{case.masked_sinogram} does not hold a sinogram")
    return reference, sparse


# ---- subcommands ----


def cmd_phantom(args) -> int:
    out = Path(args.out)
    if args.kind == "shepp-logan":
        img = rasterize_phantom(shepp_logan_spec(args.size, args.pixel_size))
        out.parent.mkdir(parents=True, exist_ok=True)
        save_array(out, img)
        if args.png:
            write_png(
                out.with_suffix(".png"),
                normalize_window(img, float(img.values.min()), float(img.values.max())),
            )
    else:
        out.mkdir(parents=True, exist_ok=True)
        specs = gen_random_phantom_corpus(
            args.n, seed=args.seed, width=args.size, height=args.size, pixel_size=args.pixel_size
        )
        for k, spec in enumerate(specs):
            save_array(out / f"phantom_{k:03d}.rspf", rasterize_phantom(spec))
        (out / "corpus.json").write_text(
            json.dumps([s.to_dict() for s in specs], indent=2, sort_keys=True) + "\n"
        )
    return 0


def cmd_simulate(args) -> int:
    phantom = load_array(args.phantom)
    if not isinstance(phantom, Image):
        raise ConfigError(f"{args.phantom} does not hold an image")
    geom = make_geometry(
        image_width=phantom.width,
        image_height=phantom.height,
        pixel_size=phantom.pixel_size,
        n_views=args.views,
        source_to_center=args.source_distance,
        center_to_detector=args.detector_distance,
        detector_angular_pitch=args.pitch,
        n_detectors=args.detectors,
    )
    if args.noise == "none":
        noise = NoiseModel.none()
    elif args.noise == "gaussian":
        noise = NoiseModel.gaussian(args.sigma_g)
    else:
        noise = NoiseModel.poisson(args.i0)
    out = Path(args.out)
    case = make_sparse_case(
        phantom,
        geom,
        keep=args.keep,
        noise=noise,
        rng_seed=args.seed,
        out_dir=out,
        case_id=args.case_id,
        split=args.split,
    )
    DatasetManifest(cases=(case,)).save(out / "manifest.json")
    return 0


def cmd_recon(args) -> int:
    cfg_file = load_run_config(args.config)
    manifest_path = Path(args.manifest)
    manifest = DatasetManifest.load(manifest_path)
    case = _select_case(manifest, args.case_id)
    reference, y_sp = _load_case_arrays(manifest_path, case)
    geom, mask = case.geometry, case.mask
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = f"{case.case_id}_{args.method}"
    window = tuple(args.window) if args.window else None

    if args.method == "fbp":
        image = fbp_reconstruct(y_sp, geom, _build_fbp_config(cfg_file, args))
    elif args.method == "asdpocs":
        start = fbp_reconstruct(y_sp, geom, _build_fbp_config(cfg_file, args))
        image = asd_pocs_run(start, y_sp, geom, mask, _build_asdpocs_config(cfg_file, args))
    else:
        cfg = _build_respf_config(cfg_file, args)
        denoiser, remote = _make_denoiser(args)
        try:
            result = respf_reconstruct(y_sp, geom, mask, cfg, denoiser, reference=reference)
        finally:
            if remote is not None:
                remote.close()
        image = result.final
        write_step_log(result.per_step_log, out / f"{stem}_steps.csv")

    _write_image_outputs(image, out, stem, window)
    row = {
        "case_id": case.case_id,
        "method": args.method,
        "views": int(mask.kept.size),
        "psnr": psnr(image, reference),
        "ssim": ssim(image, reference),
    }
    _write_metrics_csv(out / "metrics.csv", [row])
    return 0


def cmd_eval(args) -> int:
    image = load_array(args.image)
    reference = load_array(args.reference)
    if not isinstance(image, Image) or not isinstance(reference, Image):
        raise ConfigError("eval expects two image array files")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    row = {
        "case_id": args.case_id,
        "method": args.method,
        "views": args.views,
        "psnr": psnr(image, reference),
        "ssim": ssim(image, reference),
    }
    _write_metrics_csv(out, [row])
    if args.nps_roi:
        roi = tuple(args.nps_roi)
        residual = image.with_values(image.as_float64() - reference.as_float64())
        save_array(out.with_name(out.stem + "_nps.rspf"), nps(residual, roi))
    return 0


def cmd_sweep_alpha(args) -> int:
    cfg_file = load_run_config(args.config)
    manifest_path = Path(args.manifest)
    manifest = DatasetManifest.load(manifest_path)
    case = _select_case(manifest, args.case_id)
    reference, y_sp = _load_case_arrays(manifest_path, case)
    denoiser, remote = _make_denoiser(args)
    base = _build_respf_config(cfg_file, args)
    rows = []
    try:
        for k in range(11):
            alpha = k / 10.0
            cfg = ResPFConfig(
                schedule=base.schedule,
                hijack_index=base.hijack_index,
                fusion_alpha=alpha,
                fusion_convention=base.fusion_convention,
                dc_config=base.dc_config,
                denoiser_source=base.denoiser_source,
                rng_seed=base.rng_seed,
                fbp_config=base.fbp_config,
            )
            result = respf_reconstruct(y_sp, case.geometry, case.mask, cfg, denoiser)
            rows.append(
                (alpha, psnr(result.final, reference), ssim(result.final, reference))
            )
    finally:
        if remote is not None:
            remote.close()
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["alpha", "psnr", "ssim"])
        for alpha, p, s in rows:
            writer.writerow([repr(alpha), repr(p), repr(s)])
    return 0


def cmd_field_demo(args) -> int:
    angles = 2.0 * np.pi * np.arange(args.n_charges) / args.n_charges
    charges = tuple(
        Image(np.array([[math.cos(a), math.sin(a)]], dtype=np.float32)) for a in angles
    )
    denoiser = ExactEmpiricalDenoiser(ChargeSet(charges, D=args.charge_d))
    schedule = make_schedule(n_steps=args.n_steps)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["trajectory", "step", "t", "x", "y"])
        for k in range(args.n_trajectories):
            rng = np.random.default_rng(args.seed + k)
            start = Image(
                (schedule.times[0] * rng.standard_normal((1, 2))).astype(np.float32)
            )
            states = sample_trajectory(start, schedule, 0, denoiser)
            for i, state in enumerate(states):
                t = float(schedule.times[i]) if i < schedule.n_steps else 0.0
                x, y = (float(v) for v in state.values.ravel())
                writer.writerow([k, i, repr(t), repr(x), repr(y)])
    return 0


# ---- parser ----


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="respf",
        description="Sparse-view CT reconstruction toolkit (projector, FBP, "
        "ASD-POCS, and a hybrid sampling pipeline).",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate phantom images")
    p.add_argument("--kind", choices=["shepp-logan", "random-corpus"], default="shepp-logan")
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--pixel-size", type=float, default=1.0)
    p.add_argument("--n", type=int, default=1, help="corpus size (random-corpus)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--png", action="store_true", help="also write a PNG preview")
    p.add_argument("--out", required=True, help="output file (shepp-logan) or directory")
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("simulate", help="simulate a sparse-view dataset case")
    p.add_argument("--phantom", required=True)
    p.add_argument("--views", type=int, default=360)
    p.add_argument("--keep", type=int, required=True)
    p.add_argument("--detectors", type=int, default=None)
    p.add_argument("--source-distance", type=float, default=550.0)
    p.add_argument("--detector-distance", type=float, default=400.0)
    p.add_argument("--pitch", type=float, default=1.0 / 512.0)
    p.add_argument("--noise", choices=["none", "gaussian", "poisson"], default="none")
    p.add_argument("--sigma-g", type=float, default=0.01)
    p.add_argument("--i0", type=float, default=1e6)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--case-id", default="case")
    p.add_argument("--split", default="test")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("recon", help="reconstruct a dataset case")
    p.add_argument("--manifest", required=True)
    p.add_argument("--case-id", default=None)
    p.add_argument("--method", choices=["fbp", "asdpocs", "respf"], required=True)
    p.add_argument("--config", default=None, help="JSON config file")
    p.add_argument("--out", required=True)
    p.add_argument("--window", type=float, nargs=2, default=None, help="PNG display window")
    p.add_argument("--filter", choices=["ram-lak", "shepp-logan"], default=None)
    p.add_argument("--cutoff", type=float, default=None)
    p.add_argument("--dc-iterations", type=int, default=None)
    p.add_argument("--dc-subsets", type=int, default=None)
    p.add_argument("--n-steps", type=int, default=None)
    p.add_argument("--tau", type=int, default=None)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--fusion-convention", choices=["alg1", "eq25"], default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--denoiser", choices=["exact", "remote"], default="exact")
    p.add_argument("--charges", default=None, help="directory of .rspf charge images")
    p.add_argument("--charge-d", type=float, default=128.0)
    p.add_argument("--server", default=None, help="remote denoiser command line")
    p.add_argument("--tcp", default=None, help="remote denoiser HOST:PORT")
    p.add_argument("--bridge-timeout", type=float, default=10.0)
    p.set_defaults(func=cmd_recon)

    p = sub.add_parser("eval", help="metrics between an image and a reference")
    p.add_argument("--image", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--case-id", default="case")
    p.add_argument("--method", default="unknown")
    p.add_argument("--views", type=int, default=0)
    p.add_argument("--nps-roi", type=int, nargs=4, default=None, metavar=("R0", "C0", "H", "W"))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep-alpha", help="grid the fusion coefficient, write alpha/psnr/ssim CSV")
    p.add_argument("--manifest", required=True)
    p.add_argument("--case-id", default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--n-steps", type=int, default=None)
    p.add_argument("--tau", type=int, default=None)
    p.add_argument("--fusion-convention", choices=["alg1", "eq25"], default=None)
    p.add_argument("--dc-iterations", type=int, default=None)
    p.add_argument("--dc-subsets", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--denoiser", choices=["exact", "remote"], default="exact")
    p.add_argument("--charges", default=None)
    p.add_argument("--charge-d", type=float, default=128.0)
    p.add_argument("--server", default=None)
    p.add_argument("--tcp", default=None)
    p.add_argument("--bridge-timeout", type=float, default=10.0)
    p.set_defaults(func=cmd_sweep_alpha)

    p = sub.add_parser("field-demo", help="2-D exact-field sampling trajectories as CSV")
    p.add_argument("--n-charges", type=int, default=8)
    p.add_argument("--n-trajectories", type=int, default=16)
    p.add_argument("--n-steps", type=int, default=16)
    p.add_argument("--charge-d", type=float, default=128.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_field_demo)

    return parser


def _exit_code_for(err: Exception) -> int:
    if isinstance(err, (ConfigError, ParameterError)):
        return 2
    if isinstance(err, (ArrayFileError, OSError)):
        return 3
    if isinstance(err, (NumericalError, ArithmeticError)):
        return 4
    if isinstance(err, (BridgeError, RespfError)):
        return 3
    return 4


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as err:  # mapped to documented exit codes
        print(f"error: {err}", file=sys.stderr)
        return _exit_code_for(err)


if __name__ == "__main__":
    sys.exit(main())
