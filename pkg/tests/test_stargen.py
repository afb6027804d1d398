import json
import time
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stardiff.dataio import load_manifest
from stardiff.metrics import psnr
from stardiff.stargen import (SceneSpec, StarCatalog, generate_dataset, horizon_profile, render_landscape_mask,
                              render_pair, render_starfield, sample_spec, sample_stars, sky_background,
                              star_layer)


def test_no_stars_gives_linear_sky():
    spec = SceneSpec(width=16, height=33, star_count=0, sky_gradient=(0.02, 0.18))
    out = render_starfield(spec, np.random.default_rng(0), "reference")
    lum = out.mean(axis=(1, 2)) / np.mean([0.85, 0.95, 1.20])
    assert lum[0] == pytest.approx(0.02, abs=1e-12)
    assert lum[-1] == pytest.approx(0.18, abs=1e-12)
    np.testing.assert_allclose(np.diff(lum, 2), 0.0, atol=1e-14)
    assert np.ptp(out, axis=1).max() == 0.0


def one_star(flux, row=32.3, col=31.6):
    return StarCatalog(np.array([row]), np.array([col]), np.array([flux]), np.ones((1, 3)))


@pytest.mark.parametrize("role, factor", [("input", 1.0), ("reference", 1.6)])
def test_single_star_flux_conserved(role, factor):
    spec = SceneSpec(star_count=1, halo_gain=0.6, halo_sigma=3.0)
    layer = star_layer(spec, one_star(2.0), role)
    # halo tint has channel mean 1, so the channel-averaged total is f * (1 + gain)
    assert layer.sum() / 3 == pytest.approx(2.0 * factor, rel=0.01)


def test_flux_lost_only_off_image():
    spec = SceneSpec(star_count=1, halo_gain=0.0)
    assert star_layer(spec, one_star(1.0, 0.2, 0.2), "input").sum() / 3 < 0.9


def test_roles_share_star_positions():
    spec = SceneSpec(star_count=30, sky_gradient=(0.0, 0.0), halo_gain=0.0,
                     psf_sigma_input=0.6, psf_sigma_reference=0.6)
    a = render_starfield(spec, np.random.default_rng(5), "input")
    b = render_starfield(spec, np.random.default_rng(5), "reference")
    assert np.array_equal(a, b)


def test_stars_above_horizon():
    spec = SceneSpec(star_count=500)
    cat = sample_stars(spec, np.random.default_rng(1))
    horizon = horizon_profile(spec)
    assert np.all(cat.rows < horizon[cat.cols.astype(int)])
    assert np.all((cat.fluxes >= spec.flux_min) & (cat.fluxes <= spec.flux_max))


def test_power_law_fluxes_favor_faint_stars():
    cat = sample_stars(SceneSpec(star_count=5000), np.random.default_rng(2))
    mid = np.sqrt(0.05 * 3.0)
    assert np.mean(cat.fluxes < mid) > 0.6


def test_mask_deterministic_and_single_transition():
    spec = SceneSpec(width=40, height=30, landscape_seed=3)
    m1, m2 = render_landscape_mask(spec), render_landscape_mask(spec)
    assert np.array_equal(m1, m2)
    assert set(np.unique(m1)) <= {0.0, 1.0}
    transitions = np.abs(np.diff(m1, axis=0)).sum(axis=0)
    assert np.all(transitions == 1)
    assert np.all(m1[0] == 0) and np.all(m1[-1] == 1)


def test_land_fraction_over_seeds():
    for seed in range(100):
        m = render_landscape_mask(SceneSpec(landscape_seed=seed))
        assert 0.2 <= m.mean() <= 0.6, seed


def test_horizon_within_band():
    for seed in range(20):
        rows = horizon_profile(SceneSpec(width=128, height=96, landscape_seed=seed))
        assert rows.min() >= 0.4 * 96 and rows.max() <= 0.8 * 96


def test_degenerate_spec_gives_identical_pair():
    spec = SceneSpec(exposure_ratio=1 - 1e-12, halo_gain=0.0, psf_sigma_input=0.9, psf_sigma_reference=0.9,
                     landscape_luminance_input=0.3, landscape_luminance_reference=0.3, noise_var_input=0.0)
    inp, ref = render_pair(spec, np.random.default_rng(0))
    np.testing.assert_allclose(inp, ref, atol=1e-11)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_input_darker_than_reference(seed):
    rng = np.random.default_rng(seed)
    spec = sample_spec({}, 32, rng)
    inp, ref = render_pair(spec, rng)
    assert inp.mean() < ref.mean()
    for img in (inp, ref):
        assert np.isfinite(img).all() and img.min() >= 0 and img.max() <= 1


def test_default_spec_psnr_band():
    vals = [psnr(*render_pair(SceneSpec(), np.random.default_rng(s))) for s in range(5)]
    # recorded from the first build over seeds 0..19: 12.578 .. 12.647 dB
    assert vals[0] == pytest.approx(12.577927149400935, abs=1e-6)
    assert all(12.4 <= v <= 12.85 for v in vals)


@pytest.mark.parametrize("kwargs", [dict(exposure_ratio=1.0), dict(psf_sigma_reference=0.5),
                                    dict(landscape_luminance_input=0.5), dict(star_count=-1)])
def test_spec_validation(kwargs):
    with pytest.raises(ValueError):
        render_pair(replace(SceneSpec(), **kwargs), np.random.default_rng(0))


def test_spec_round_trip():
    spec = sample_spec({}, 64, np.random.default_rng(4))
    assert SceneSpec.from_dict(json.loads(json.dumps(spec.to_dict()))) == spec


def test_sky_background_shape():
    assert sky_background(SceneSpec(width=7, height=5)).shape == (5, 7, 3)


def test_dataset_reproducible(tmp_path):
    m1 = generate_dataset(1, tmp_path / "a", seed=11, size=32)
    m2 = generate_dataset(1, tmp_path / "b", seed=11, size=32)
    for rel in ("input/pair_00000.png", "reference/pair_00000.png", "manifest.jsonl"):
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()
    assert m1.name == m2.name == "manifest.jsonl"


def test_dataset_manifest_and_timing(tmp_path):
    start = time.perf_counter()
    path = generate_dataset(64, tmp_path, seed=7, size=64)
    assert time.perf_counter() - start < 60
    man = load_manifest(path)
    assert len(man) == 64
    for e in man:
        assert man.input_path(e).is_file() and man.reference_path(e).is_file()
        assert SceneSpec.from_dict(e.spec).width == 64
        assert isinstance(e.seed, int)


def test_dataset_rejects_zero_pairs(tmp_path):
    with pytest.raises(ValueError):
        generate_dataset(0, tmp_path)


def test_dataset_unwritable(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        generate_dataset(1, blocker / "sub")
