"""Acceptance suite.

Each criterion prints a single `[ACCEPTANCE n] <name>: PASS/FAIL` line
(visible with `pytest -s` or in the captured output of a failing run).
Criteria 3 and 4 share one 64-cube registration run.
"""
import functools
import json
import sys
import time

import numpy as np
import pytest
from scipy.ndimage import gaussian_filter

import protoreg as pr
from protoreg import io
from protoreg.cli import EXIT_OK, cli

import oracles
from conftest import SMALL_PHANTOM, lattice_safe_field, random_volume
from test_similarity import check_gradient


def _criterion(n, name):
    def deco(fn):
        @functools.wraps(fn)
        def wrapper(*args, **kw):
            # write past pytest's capture so one line per criterion is
            # always visible
            try:
                detail = fn(*args, **kw)
            except BaseException:
                sys.__stdout__.write(f"\n[ACCEPTANCE {n}] {name}: FAIL\n")
                raise
            sys.__stdout__.write(f"\n[ACCEPTANCE {n}] {name}: PASS"
                                 + (f" ({detail})" if detail else "") + "\n")
        return wrapper
    return deco


# ---------------------------------------------------------------------------
# 1. gradient correctness

@_criterion(1, "gradient-vs-finite-differences")
def test_criterion_1_gradient():
    t0 = time.perf_counter()
    worst = 0.0
    count = 0
    for seed in range(100):
        n = 5 + seed % 4                      # sizes 5..8
        rel = check_gradient(seed, n,
                             with_mask=bool(seed % 2),
                             with_weights=bool(seed % 3 == 0),
                             lam=0.2 if seed % 2 else 0.0)
        worst = max(worst, rel)
        count += 1
        assert rel < 1e-3, f"instance {seed} (n={n}) rel error {rel:.2e}"
    elapsed = time.perf_counter() - t0
    assert count >= 100
    assert elapsed < 120.0, f"took {elapsed:.1f}s"
    return f"{count} instances, worst rel err {worst:.2e}, {elapsed:.1f}s"


# ---------------------------------------------------------------------------
# 2. oracle equivalence

@_criterion(2, "oracle-equivalence")
def test_criterion_2_oracles():
    t0 = time.perf_counter()
    rng = np.random.default_rng(77)

    a = random_volume(rng, (16, 16, 16))
    b = random_volume(rng, (16, 16, 16))
    m = pr.Volume((rng.random((16, 16, 16)) > 0.35).astype(np.float32))
    full = pr.Volume(np.ones((16, 16, 16), dtype=np.float32))

    assert pr.masked_ncc(a, b, m) == pytest.approx(
        oracles.masked_ncc(a.data, b.data, m.data), abs=1e-6)

    fld = lattice_safe_field(rng, (10, 10, 10))
    assert pr.smoothness(fld) == pytest.approx(
        oracles.smoothness(fld.data.astype(np.float64)), abs=1e-5)

    assert pr.mse(a, b, m) == pytest.approx(
        oracles.mse(a.data, b.data, m.data), abs=1e-5)
    assert pr.ssim(a, b, full) == pytest.approx(
        oracles.ssim(a.data, b.data, full.data), abs=1e-6)

    ref = pr.Volume((rng.random((12, 12, 12)) > 0.4).astype(np.float32))
    prop = pr.Volume((rng.random((12, 12, 12)) > 0.6).astype(np.float32))
    assert pr.relvoldiff(ref, prop) == pytest.approx(
        oracles.relvoldiff(ref.data, prop.data, (1, 1, 1), (1, 1, 1)), abs=1e-5)

    mask = np.zeros((10, 10, 10), dtype=np.float32)
    mask[3:7, 2:8, 4:7] = 1.0
    sp = (1.0, 1.5, 2.0)
    sdf = pr.signed_distance(pr.Volume(mask, spacing=sp))
    np.testing.assert_allclose(sdf.data,
                               oracles.signed_distance(mask, sp), atol=1e-5)

    img, st, dose = pr.make_phantom(pr.PhantomSpec(
        dims=(14, 14, 14), body_semi_axes_mm=(6.0, 5.5, 6.0),
        ctv_center_mm=(1.0, 0.5, -1.0), ctv_radius_mm=2.0,
        oars=(((-2.0, -1.0, 1.0), 1.5),), dose_tau_mm=2.5, seed=7))
    p = pr.PriorParams(sigma_mm=3.0, band_mm=1.5)
    oar_u = st.oar_union().data
    np.testing.assert_allclose(
        pr.anatomy_map(st, p).data,
        oracles.anatomy_map(st.ctv.data, oar_u, st.ctv.spacing, p.sigma_mm,
                            p.band_mm, p.w_prox, p.w_band, p.w_oar),
        atol=1e-5)
    np.testing.assert_allclose(
        pr.risk_map(dose, st, p).data,
        oracles.risk_map(dose.data, oar_u, dose.spacing, p.w_grad, p.w_iso,
                         p.w_doseoar, p.isodose_fraction),
        atol=1e-5)

    elapsed = time.perf_counter() - t0
    assert elapsed < 120.0, f"took {elapsed:.1f}s"
    return f"8 functions, {elapsed:.1f}s"


# ---------------------------------------------------------------------------
# 3/4. synthetic recovery on a 64-cube phantom (one shared run)

@pytest.fixture(scope="module")
def recovery_run():
    spec = pr.PhantomSpec()                   # 64x64x64 defaults
    img, st, dose = pr.make_phantom(spec)
    env = gaussian_filter(st.body.data.astype(np.float64), 3.0)
    env /= env.max()
    g = pr.make_smooth_field(img.dims, pr.FieldSpec(4.0, 6.0, 11), envelope=env)
    fixed = pr.warp(img, g)
    st_fixed = pr.StructureSet(
        ctv=pr.warp_contour(st.ctv, g),
        body=pr.warp_contour(st.body, g),
        oars=tuple(pr.warp_contour(o, g) for o in st.oars))
    t0 = time.perf_counter()
    fld, report = pr.register(fixed, img, pr.RegConfig(), structures=st_fixed)
    elapsed = time.perf_counter() - t0
    return img, st, fixed, st_fixed, g, fld, report, elapsed


@_criterion(3, "synthetic-recovery")
def test_criterion_3_recovery(recovery_run):
    img, st, fixed, st_fixed, g, fld, report, elapsed = recovery_run
    stats = pr.endpoint_error(fld, g, mask=st_fixed.body)
    warped = pr.warp(img, fld)
    ncc = pr.masked_ncc(fixed, warped, st_fixed.body)
    fold = pr.fold_fraction(fld)
    assert stats.mean < 0.5, f"mean EPE {stats.mean:.3f}"
    assert stats.p95 < 1.0, f"p95 EPE {stats.p95:.3f}"
    assert ncc >= 0.98, f"NCC {ncc:.4f}"
    assert fold < 0.5, f"fold fraction {fold:.3f}%"
    assert elapsed < 60.0, f"took {elapsed:.1f}s"
    return (f"mean EPE {stats.mean:.3f} vox, p95 {stats.p95:.3f} vox, "
            f"NCC {ncc:.4f}, fold {fold:.3f}%, {elapsed:.1f}s")


@_criterion(4, "ctv-propagation")
def test_criterion_4_ctv_propagation(recovery_run):
    img, st, fixed, st_fixed, g, fld, report, elapsed = recovery_run
    before = pr.relvoldiff(st_fixed.ctv, st.ctv)
    after = pr.relvoldiff(st_fixed.ctv, pr.warp_contour(st.ctv, fld))
    assert after < before, f"after {after:.3f}% !< before {before:.3f}%"
    assert after <= 0.5 * before, \
        f"after {after:.3f}% > 50% of before {before:.3f}%"
    return f"RelVolDiff before {before:.2f}%, after {after:.2f}%"


# ---------------------------------------------------------------------------
# 5. prior-guidance direction

@_criterion(5, "prior-guidance-direction")
def test_criterion_5_prior_guidance():
    img, st, dose = pr.make_phantom(SMALL_PHANTOM)
    sdf = pr.signed_distance(st.ctv).data
    sigma = 5.0
    env = np.exp(-np.maximum(sdf, 0.0) ** 2 / (2.0 * (2.0 * sigma) ** 2))
    env *= st.body.data
    base_cfg = pr.RegConfig(prior_params=pr.PriorParams(sigma_mm=sigma))
    guided_cfg = pr.RegConfig(use_anatomy=True, use_risk=True, use_gate=True,
                              prior_params=pr.PriorParams(sigma_mm=sigma))
    base_err, guided_err = [], []
    for seed in range(10):
        g = pr.make_smooth_field(img.dims, pr.FieldSpec(2.5, 4.0, 100 + seed),
                                 envelope=env)
        fixed = pr.warp(img, g)
        st_f = pr.StructureSet(
            ctv=pr.warp_contour(st.ctv, g),
            body=pr.warp_contour(st.body, g),
            oars=tuple(pr.warp_contour(o, g) for o in st.oars))
        dose_f = pr.warp(dose, g)
        f_base, _ = pr.register(fixed, img, base_cfg, structures=st_f)
        f_guided, _ = pr.register(fixed, img, guided_cfg, structures=st_f,
                                  dose=dose_f)
        base_err.append(pr.endpoint_error(f_base, g, mask=st_f.ctv).mean)
        guided_err.append(pr.endpoint_error(f_guided, g, mask=st_f.ctv).mean)
    mb = float(np.mean(base_err))
    mg = float(np.mean(guided_err))
    assert mg <= mb, f"guided {mg:.4f} > prior-free {mb:.4f}"
    return f"10 seeds, CTV mean EPE guided {mg:.4f} vs prior-free {mb:.4f} vox"


# ---------------------------------------------------------------------------
# 6. ablation identity

@_criterion(6, "ablation-identity")
def test_criterion_6_ablation_identity():
    img, st, dose = pr.make_phantom(SMALL_PHANTOM)
    env = st.body.data.astype(np.float64)
    g = pr.make_smooth_field(img.dims, pr.FieldSpec(1.5, 4.0, 21), envelope=env)
    fixed = pr.warp(img, g)
    st_f = pr.StructureSet(ctv=pr.warp_contour(st.ctv, g),
                           body=pr.warp_contour(st.body, g),
                           oars=tuple(pr.warp_contour(o, g) for o in st.oars))
    cfg = pr.RegConfig(levels=3, iterations=(15, 20, 25))
    f_plain, r_plain = pr.register(fixed, img, cfg, structures=st_f)
    # all flags off: extra inputs must not perturb a single bit
    f_extra, r_extra = pr.register(
        fixed, img, cfg, structures=st_f, dose=pr.warp(dose, g),
        embeddings=(pr.pseudo_embedding("nasopharynx, bilateral nodes"),),
        adapter_weights=pr.AdapterWeights.random(3))
    assert np.array_equal(f_plain.data, f_extra.data)
    assert r_plain.to_dict() == r_extra.to_dict()
    return "bit-identical fields and reports"


# ---------------------------------------------------------------------------
# 7. composition / pyramid unit identities

@_criterion(7, "unit-identities")
def test_criterion_7_unit_identities():
    rng = np.random.default_rng(5)

    # upsampling doubles displacement magnitudes exactly
    coarse = pr.DisplacementField(
        rng.normal(size=(3, 4, 4, 4)).astype(np.float32))
    up = pr.upsample_field(coarse, (8, 8, 8))
    np.testing.assert_array_equal(up.data[:, ::2, ::2, ::2], 2.0 * coarse.data)

    # additive composition identities
    z = pr.DisplacementField(np.zeros((3, 8, 8, 8), dtype=np.float32))
    d = lattice_safe_field(rng, (8, 8, 8))
    assert np.array_equal(pr.compose_additive(z, d).data, d.data)
    assert np.array_equal(pr.compose_additive(d, z).data, d.data)
    np.testing.assert_array_equal(pr.compose_additive(up, d).data,
                                  up.data + d.data)

    # Jacobian analytic cases: identity and uniform linear scaling
    det = pr.jacobian_det(z)
    np.testing.assert_array_equal(det.data, 1.0)
    u = np.zeros((3, 8, 8, 8), dtype=np.float32)
    u[0] = 0.5 * np.arange(8, dtype=np.float32)[:, None, None]
    det = pr.jacobian_det(pr.DisplacementField(u))
    np.testing.assert_allclose(det.data, 1.5, atol=1e-6)

    # FiLM identity and annihilation
    grid = pr.FeatureGrid(rng.normal(size=(2, 4, 4, 4)))
    out = pr.film(grid, pr.FilmParams(np.zeros(2), np.zeros(2)))
    assert np.array_equal(out.data, grid.data)
    out = pr.film(grid, pr.FilmParams([-1.0, -1.0], [0.25, -3.0]))
    assert np.all(out.data[0] == 0.25) and np.all(out.data[1] == -3.0)
    return "upsample x2, composition, Jacobian, FiLM all exact"


# ---------------------------------------------------------------------------
# 8. end-to-end CLI determinism

@_criterion(8, "cli-determinism")
def test_criterion_8_cli_determinism(tmp_path):
    spec = {"dims": [24, 24, 24], "body_semi_axes_mm": [10.0, 9.0, 10.0],
            "ctv_center_mm": [2.0, 1.0, -1.0], "ctv_radius_mm": 3.0,
            "oars": [[[-4.0, -2.0, 2.0], 2.0]], "dose_tau_mm": 4.0, "seed": 7}
    spec_path = tmp_path / "spec.json"
    spec_path.write_text(json.dumps(spec))
    ph = tmp_path / "ph"
    assert cli(["phantom", "--spec", str(spec_path), "--out", str(ph)]) == EXIT_OK

    cfg = pr.RegConfig(levels=3, iterations=(10, 12, 15),
                       rigid_iterations=(20, 10))
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(cfg.to_dict()))

    outs = []
    for run in ("a", "b"):
        out = tmp_path / run
        assert cli(["register", "--fixed", str(ph / "image"),
                    "--moving", str(ph / "image"),
                    "--body", str(ph / "body"), "--ctv", str(ph / "ctv"),
                    "--config", str(cfg_path), "--out", str(out)]) == EXIT_OK
        assert cli(["warp", "--image", str(ph / "image"),
                    "--field", str(out / "field"),
                    "--out", str(out / "warped")]) == EXIT_OK
        assert cli(["metrics", "--fixed", str(ph / "image"),
                    "--warped", str(out / "warped"),
                    "--mask", str(ph / "body"), "--field", str(out / "field"),
                    "--out", str(out / "metrics.json")]) == EXIT_OK
        outs.append(out)
    a, b = outs
    for name in ("field.raw", "field.json", "report.json",
                 "warped.raw", "warped.json", "metrics.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name
    return "field, report, warped image and metrics byte-identical"


# ---------------------------------------------------------------------------
# 9. serialization round trip

@_criterion(9, "serialization-round-trip")
def test_criterion_9_serialization(tmp_path):
    rng = np.random.default_rng(9)
    vol = pr.Volume(rng.random((5, 6, 7)).astype(np.float32),
                    spacing=(0.5, 1.0, 2.5), origin=(-1.0, 3.0, 0.0))
    io.write_volume(str(tmp_path / "v"), vol, kind="image")
    back = io.read_volume(str(tmp_path / "v"))
    assert back.data.tobytes() == vol.data.tobytes()
    assert back.spacing == vol.spacing and back.origin == vol.origin

    fld = lattice_safe_field(rng, (4, 5, 6))
    io.write_volume(str(tmp_path / "f"), fld, kind="field")
    back = io.read_volume(str(tmp_path / "f"))
    assert back.data.tobytes() == fld.data.tobytes()

    # documented 8-byte fixture: dims 2x1x1, values [1.0, 2.0]
    two = pr.Volume(np.array([1.0, 2.0], dtype=np.float32).reshape(2, 1, 1))
    io.write_volume(str(tmp_path / "two"), two, kind="image")
    assert (tmp_path / "two.raw").read_bytes() == \
        bytes.fromhex("0000803f00000040")
    return "volume + field bit-exact, 8-byte fixture matches"
