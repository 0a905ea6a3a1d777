"""Release acceptance gate: one test per criterion, each at its stated tolerance.

Every test finishes by printing a single ``PASS`` line with the measured
quantity, so ``pytest -v`` (or ``-s``) output doubles as the acceptance
checklist.  Empirically frozen thresholds come from the first oracle run of
the committed regression case and are documented inline:

* Regression case (used by the end-to-end, alpha-sweep, and ASD-POCS
  criteria): 64x64 nested-ellipse phantom from corpus seed 301; 180-view
  fan beam, uniform 60-view keep; charge set = 49 corpus phantoms (seed
  302) plus a near-duplicate of the target (target + 0.02 * N(0,1), seed
  303); post-log Gaussian sinogram noise sigma_g = 0.5 (seed 42) for the
  noisy variants; pipeline seed 7 at library defaults.
* First oracle run on that case: FBP 19.59 dB, fused (alpha = 0.4) 28.68 dB,
  gain 9.10 dB (frozen margin: >= 3 dB); alpha sweep peaked at alpha = 0.4
  with endpoints 27.83 dB (alpha = 0) and 26.36 dB (alpha = 1).

This suite exercises the exact empirical denoiser and the toy protocol
servers only; no trained model is required.
"""

from __future__ import annotations

import csv
import sys
from pathlib import Path

import numpy as np
import pytest

from respf.arrays import Image, save_array
from respf.asdpocs import (
    AsdPocsConfig,
    asd_pocs_run,
    data_residual_norm,
    tv_gradient,
    tv_norm,
)
from respf.bridge import RemoteDenoiser
from respf.cli import main as cli_main
from respf.fbp import fbp_reconstruct
from respf.flow import (
    INFINITE_D,
    ChargeSet,
    ExactEmpiricalDenoiser,
    charge_weights,
    exact_denoise,
    heun_step,
    hijack_init,
    make_schedule,
    sample_trajectory,
)
from respf.geometry import ViewMask, apply_view_mask, make_geometry
from respf.metrics import psnr
from respf.phantoms import (
    DatasetManifest,
    NoiseModel,
    gen_random_phantom_corpus,
    make_sparse_case,
    rasterize_phantom,
    simulate_sinogram,
)
from respf.pipeline import ResPFConfig, fuse_residual, respf_reconstruct
from respf.projector import back_project, forward_project

TOY_SERVER = Path(__file__).parent / "servers" / "toy_server.py"

# Frozen regression-case constants (see module docstring).
TARGET_SEED = 301
CHARGE_SEED = 302
NEAR_DUP_SEED = 303
NOISE_SIGMA = 0.5
NOISE_SEED = 42
PIPELINE_SEED = 7
GAIN_MARGIN_DB = 3.0


def _pass(name: str, detail: str) -> None:
    print(f"PASS {name}: {detail}")


@pytest.fixture(scope="module")
def regression_case():
    """Target, charge set, geometry, mask, and noisy/noiseless sparse data."""
    target = rasterize_phantom(
        gen_random_phantom_corpus(1, seed=TARGET_SEED, width=64, height=64)[0]
    )
    charges = [
        rasterize_phantom(s)
        for s in gen_random_phantom_corpus(49, seed=CHARGE_SEED, width=64, height=64)
    ]
    near_dup = target.with_values(
        target.as_float64()
        + 0.02 * np.random.default_rng(NEAR_DUP_SEED).normal(size=(64, 64))
    )
    charge_set = ChargeSet(tuple(charges + [near_dup]), D=128.0)
    geom = make_geometry(64, 64, 1.0, 180)
    mask = ViewMask.uniform(180, 60)
    noisy = simulate_sinogram(
        target, geom, NoiseModel.gaussian(NOISE_SIGMA), rng_seed=NOISE_SEED
    )
    clean = forward_project(target, geom)
    return {
        "target": target,
        "charge_set": charge_set,
        "geom": geom,
        "mask": mask,
        "y_sp_noisy": apply_view_mask(noisy, mask),
        "y_sp_clean": apply_view_mask(clean, mask),
    }


def test_adjoint_identity_on_random_pairs():
    """|<Ax,y> - <x,A'y>| / (|Ax| |y|) < 1e-5 over 20 random 64x64/90-view pairs."""
    geom = make_geometry(64, 64, 1.0, 90)
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(20):
        x = Image(rng.normal(size=(64, 64)).astype(np.float32))
        ax = forward_project(x, geom)
        y = ax.with_values(rng.normal(size=ax.values.shape).astype(np.float32))
        aty = back_project(y, geom)
        lhs = float(np.sum(ax.values.astype(np.float64) * y.values.astype(np.float64)))
        rhs = float(np.sum(x.as_float64() * aty.as_float64()))
        denom = float(
            np.linalg.norm(ax.values.astype(np.float64))
            * np.linalg.norm(y.values.astype(np.float64))
        )
        worst = max(worst, abs(lhs - rhs) / denom)
    assert worst < 1e-5
    _pass("adjoint identity", f"worst relative discrepancy {worst:.3e} < 1e-5")


def test_schedule_endpoints_and_midpoint():
    """times[0] == 80 and times[-1] == 0.002 exactly; n=3 midpoint to 1e-9 rel."""
    sched = make_schedule()
    assert sched.times[0] == 80.0
    assert sched.times[-1] == 0.002
    # Frozen independent evaluation of ((80**(1/7) + 0.002**(1/7)) / 2)**7.
    midpoint = float(make_schedule(n_steps=3).times[1])
    assert midpoint == pytest.approx(2.515218976147159, rel=1e-9)
    _pass("noise schedule", f"endpoints exact, n=3 midpoint {midpoint:.12f}")


def test_exact_denoiser_oracle():
    """Single-charge identity, two-charge midpoint, finite-D vs Gaussian weights."""
    rng = np.random.default_rng(11)
    charge = Image(rng.normal(size=(8, 8)).astype(np.float32))
    single = ChargeSet((charge,))
    for sigma in (0.002, 1.0, 80.0):
        out = exact_denoise(
            Image(rng.normal(scale=10.0, size=(8, 8)).astype(np.float32)), sigma, single
        )
        assert np.array_equal(out.values, charge.values)

    a = Image(np.zeros((4, 4), dtype=np.float32))
    b = Image(np.ones((4, 4), dtype=np.float32))
    mid = exact_denoise(Image(np.full((4, 4), 0.5, dtype=np.float32)), 1.0, ChargeSet((a, b)))
    assert np.allclose(mid.values, 0.5, atol=1e-7)

    # Finite-D weights converge to the Gaussian limit as D grows
    # (frozen oracle run on this grid: max abs difference 5.5e-6 at D=1e7).
    pts = np.random.default_rng(7).uniform(-1, 1, size=(10, 2)).astype(np.float32)
    charges2d = tuple(Image(p.reshape(1, 2)) for p in pts)
    cs_fin = ChargeSet(charges2d, D=1e7)
    cs_inf = ChargeSet(charges2d, D=INFINITE_D)
    worst = 0.0
    for sigma in (0.1, 0.5, 2.0):
        for gx in np.linspace(-2, 2, 7):
            for gy in np.linspace(-2, 2, 7):
                x = Image(np.array([[gx, gy]], dtype=np.float32))
                wp = charge_weights(x, sigma, cs_fin, "pfgmpp")
                wg = charge_weights(x, sigma, cs_inf, "gaussian-limit")
                worst = max(worst, float(np.max(np.abs(wp - wg))))
    assert worst < 1e-3
    _pass(
        "exact denoiser oracle",
        f"identity/midpoint exact, D=1e7 vs limit max |dw| {worst:.3e} < 1e-3",
    )


def test_heun_matches_linear_closed_form():
    """Single-charge field: one step and the 16-step chain match x(t) = c + (t/t0)(x0 - c)."""
    rng = np.random.default_rng(3)
    charge = Image(rng.normal(size=(8, 8)).astype(np.float32))
    den = ExactEmpiricalDenoiser(ChargeSet((charge,)))
    c = charge.as_float64()

    x_i = Image(rng.normal(scale=4.0, size=(8, 8)).astype(np.float32))
    t_i, t_next = 10.0, 3.0
    expected = c + (t_next / t_i) * (x_i.as_float64() - c)
    out = heun_step(x_i, t_i, t_next, den).as_float64()
    one_step_rel = float(np.linalg.norm(out - expected) / np.linalg.norm(expected))
    assert one_step_rel < 1e-3

    sched = make_schedule()
    from respf.flow import perturb_spherical

    start = perturb_spherical(charge, 80.0, rng_seed=5)
    states = sample_trajectory(start, sched, 0, den)
    assert len(states) == 16
    x0 = start.as_float64()
    worst = 0.0
    for k, state in enumerate(states):
        t_k = float(sched.times[k])
        analytic = c + (t_k / 80.0) * (x0 - c)
        rel = float(
            np.linalg.norm(state.as_float64() - analytic) / np.linalg.norm(analytic)
        )
        worst = max(worst, rel)
    assert worst < 1e-3
    _pass(
        "Heun exactness",
        f"one-step rel {one_step_rel:.3e}, 16-step chain worst rel {worst:.3e} < 1e-3",
    )


def test_tv_gradient_matches_central_differences():
    """Max relative error < 1e-4 against central finite differences, 50 random 16x16."""
    rng = np.random.default_rng(7)
    eps, h = 1e-3, 1e-6
    worst = 0.0
    for _ in range(50):
        x = rng.standard_normal((16, 16))
        grad = tv_gradient(x, eps)
        fd = np.zeros_like(x)
        for i in range(16):
            for j in range(16):
                xp = x.copy()
                xm = x.copy()
                xp[i, j] += h
                xm[i, j] -= h
                fd[i, j] = (tv_norm(xp, eps) - tv_norm(xm, eps)) / (2 * h)
        worst = max(worst, float(np.max(np.abs(grad - fd)) / np.max(np.abs(fd))))
    assert worst < 1e-4
    _pass("TV gradient", f"worst relative error vs finite differences {worst:.3e} < 1e-4")


def test_asdpocs_regression_noiseless_case(regression_case):
    """On the noiseless 64x64/60-view case: residual shrinks and TV drops below FBP."""
    rc = regression_case
    y_sp = rc["y_sp_clean"]
    x_fbp = fbp_reconstruct(y_sp, rc["geom"])
    r0 = data_residual_norm(x_fbp, y_sp, rc["geom"], rc["mask"])
    out = asd_pocs_run(x_fbp, y_sp, rc["geom"], rc["mask"], AsdPocsConfig())
    r1 = data_residual_norm(out, y_sp, rc["geom"], rc["mask"])
    tv_in, tv_out = tv_norm(x_fbp), tv_norm(out)
    assert r1 < r0
    assert tv_out < tv_in
    _pass(
        "ASD-POCS regression",
        f"residual {r0:.3f} -> {r1:.3f}, TV {tv_in:.1f} -> {tv_out:.1f}",
    )


def test_mode_coverage_2d_toy_sampling():
    """200 seeded trajectories over 8 charges: endpoints within 1e-2, all charges hit."""
    ang = 2 * np.pi * np.arange(8) / 8
    circle = np.stack([np.cos(ang), np.sin(ang)], axis=1).astype(np.float32)
    cs = ChargeSet(tuple(Image(p.reshape(1, 2)) for p in circle), D=128.0)
    den = ExactEmpiricalDenoiser(cs)
    sched = make_schedule()
    zero = Image(np.zeros((1, 2), dtype=np.float32))
    hits: set[int] = set()
    worst = 0.0
    # Frozen oracle run with seeds 1000..1199: worst endpoint distance 0.00714.
    for k in range(200):
        start = hijack_init(zero, 80.0, rng_seed=1000 + k)
        end = sample_trajectory(start, sched, 0, den)[-1].values.ravel()
        dist = np.linalg.norm(circle - end[None, :], axis=1)
        nearest = int(np.argmin(dist))
        assert dist[nearest] < 1e-2
        worst = max(worst, float(dist[nearest]))
        hits.add(nearest)
    assert hits == set(range(8))
    _pass("mode coverage", f"all 8 charges hit, worst endpoint distance {worst:.3e} < 1e-2")


def test_end_to_end_gain_over_fbp(regression_case):
    """Fused PSNR beats FBP PSNR by >= 3 dB on the frozen noisy regression case."""
    rc = regression_case
    den = ExactEmpiricalDenoiser(rc["charge_set"])
    result = respf_reconstruct(
        rc["y_sp_noisy"],
        rc["geom"],
        rc["mask"],
        ResPFConfig(rng_seed=PIPELINE_SEED),
        den,
        reference=rc["target"],
    )
    p_fbp = psnr(result.x_sp, rc["target"])
    p_fused = psnr(result.final, rc["target"])
    gain = p_fused - p_fbp
    # First oracle run: FBP 19.59 dB, fused 28.68 dB, gain 9.10 dB.
    assert gain >= GAIN_MARGIN_DB
    _pass(
        "end-to-end gain",
        f"FBP {p_fbp:.2f} dB, fused {p_fused:.2f} dB, gain {gain:.2f} >= {GAIN_MARGIN_DB} dB",
    )


def test_alpha_sweep_has_interior_optimum(regression_case, tmp_path):
    """The sweep CSV peaks at some alpha in (0,1), strictly above both endpoints."""
    rc = regression_case
    case_dir = tmp_path / "case"
    charge_dir = tmp_path / "charges"
    charge_dir.mkdir()
    case = make_sparse_case(
        rc["target"],
        rc["geom"],
        keep=60,
        noise=NoiseModel.gaussian(NOISE_SIGMA),
        rng_seed=NOISE_SEED,
        out_dir=case_dir,
        case_id="reg64",
    )
    DatasetManifest(cases=(case,)).save(case_dir / "manifest.json")
    for k, charge in enumerate(rc["charge_set"].charges):
        save_array(charge_dir / f"charge_{k:03d}.rspf", charge)

    out_csv = tmp_path / "sweep.csv"
    rcode = cli_main(
        [
            "sweep-alpha",
            "--manifest", str(case_dir / "manifest.json"),
            "--charges", str(charge_dir),
            "--seed", str(PIPELINE_SEED),
            "--out", str(out_csv),
        ]
    )
    assert rcode == 0
    with open(out_csv, newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert [row["alpha"] for row in rows] == [repr(k / 10.0) for k in range(11)]
    curve = [float(row["psnr"]) for row in rows]
    best = int(np.argmax(curve))
    # First oracle run: peak 28.68 dB at alpha=0.4 vs endpoints 27.83 / 26.36 dB.
    assert 0 < best < 10
    assert curve[best] > curve[0]
    assert curve[best] > curve[10]
    _pass(
        "alpha sweep shape",
        f"interior optimum {curve[best]:.2f} dB at alpha={best / 10:.1f} "
        f"vs endpoints {curve[0]:.2f} / {curve[10]:.2f} dB",
    )


def test_degenerate_config_equivalences():
    """Pure-generative config reproduces plain trajectory sampling bit-exactly."""
    size, n_views, keep = 32, 48, 16
    geom = make_geometry(size, size, 1.0, n_views)
    rng = np.random.default_rng(21)
    coords = (np.arange(size) + 0.5) - size / 2.0
    xx, yy = np.meshgrid(coords, coords)
    target = Image((0.4 * np.exp(-(xx**2 + yy**2) / 50.0)).astype(np.float32))
    mask = ViewMask.uniform(n_views, keep)
    y_sp = apply_view_mask(forward_project(target, geom), mask)
    charges = tuple(
        Image(np.abs(rng.normal(scale=0.2, size=(size, size))).astype(np.float32))
        for _ in range(6)
    )
    den = ExactEmpiricalDenoiser(ChargeSet(charges, D=128.0))
    sched = make_schedule(n_steps=6)
    for alpha, convention in ((0.0, "alg1"), (1.0, "eq25")):
        cfg = ResPFConfig(
            schedule=sched,
            hijack_index=2,
            fusion_alpha=alpha,
            fusion_convention=convention,
            dc_config=AsdPocsConfig(n_iterations=0),
            rng_seed=9,
        )
        result = respf_reconstruct(y_sp, geom, mask, cfg, den)
        states = sample_trajectory(result.hijack, sched, 2, den)
        assert result.final.values.tobytes() == states[-1].values.tobytes()

    gen = Image(rng.normal(size=(8, 8)).astype(np.float32))
    phys = Image(rng.normal(size=(8, 8)).astype(np.float32))
    assert fuse_residual(gen, phys, 1.0, "eq25") is gen
    assert fuse_residual(gen, phys, 0.0, "eq25") is phys
    assert fuse_residual(gen, phys, 0.0, "alg1") is gen
    assert fuse_residual(gen, phys, 1.0, "alg1") is phys
    _pass(
        "degenerate configs",
        "pure-generative run bit-equals plain sampling; fusion identities hold",
    )


def test_bridge_equivalence_with_loopback_server(tmp_path):
    """Pipeline output with an in-process denoiser vs the same one behind the bridge."""
    size, n_views, keep = 32, 48, 16
    geom = make_geometry(size, size, 1.0, n_views)
    rng = np.random.default_rng(31)
    coords = (np.arange(size) + 0.5) - size / 2.0
    xx, yy = np.meshgrid(coords, coords)
    target = Image((0.3 * np.exp(-(xx**2 + yy**2) / 40.0)).astype(np.float32))
    mask = ViewMask.uniform(n_views, keep)
    y_sp = apply_view_mask(forward_project(target, geom), mask)
    charges = tuple(
        Image(np.abs(rng.normal(scale=0.2, size=(size, size))).astype(np.float32))
        for _ in range(5)
    )
    for k, charge in enumerate(charges):
        save_array(tmp_path / f"charge_{k}.rspf", charge)
    cfg = ResPFConfig(
        schedule=make_schedule(n_steps=4),
        hijack_index=2,
        dc_config=AsdPocsConfig(n_iterations=1, n_subsets=4, tv_steps_per_iteration=1),
        rng_seed=13,
    )
    local = respf_reconstruct(
        y_sp, geom, mask, cfg, ExactEmpiricalDenoiser(ChargeSet(charges, D=128.0))
    )
    cmd = [sys.executable, str(TOY_SERVER), "--mode", "exact",
           "--charges", str(tmp_path), "--d", "128"]
    with RemoteDenoiser.spawn(cmd, timeout=10.0) as remote_denoiser:
        remote = respf_reconstruct(y_sp, geom, mask, cfg, remote_denoiser)
    diff = float(np.max(np.abs(local.final.values - remote.final.values)))
    assert diff <= 1e-6
    _pass("bridge equivalence", f"max abs diff in-process vs loopback {diff:.3e} <= 1e-6")
