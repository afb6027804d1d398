"""Procedural star-field scenes rendered as aligned (input, reference) pairs.

The input is a dim, noisy exposure with tight star profiles and a dark
landscape; the reference is properly exposed, with a soft warm glow around
the brightest stars and a clearly lit landscape. Both share star positions and
horizon.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Optional, Union

import numpy as np
from scipy import ndimage
from scipy.special import erf

from .dataio import ManifestEntry, save_png, write_manifest

SKY_TINT = np.array([0.85, 0.95, 1.20])
LAND_TINT = np.array([1.10, 1.00, 0.90])
HALO_TINT = np.array([1.15, 1.00, 0.85])
HORIZON_BAND = (0.4, 0.8)


@dataclass(frozen=True)
class SceneSpec:
    width: int = 64
    height: int = 64
    star_count: int = 80
    brightness_exponent: float = -1.5
    flux_min: float = 0.05
    flux_max: float = 3.0
    psf_sigma_input: float = 0.7
    psf_sigma_reference: float = 1.0
    halo_sigma: float = 3.0
    halo_gain: float = 0.6
    sky_gradient: tuple[float, float] = (0.04, 0.12)
    landscape_seed: int = 0
    landscape_luminance_input: float = 0.05
    landscape_luminance_reference: float = 0.35
    exposure_ratio: float = 0.3
    noise_var_input: float = 20.0

    def validate(self) -> None:
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be positive")
        if self.star_count < 0:
            raise ValueError("star_count must be non-negative")
        if not 0 < self.flux_min <= self.flux_max:
            raise ValueError("need 0 < flux_min <= flux_max")
        if self.psf_sigma_input <= 0 or self.halo_sigma <= 0:
            raise ValueError("PSF widths must be positive")
        if self.psf_sigma_reference < self.psf_sigma_input:
            raise ValueError("reference PSF must be at least as wide as the input PSF")
        if self.landscape_luminance_reference < self.landscape_luminance_input:
            raise ValueError("reference landscape must be at least as bright as the input")
        if not 0 < self.exposure_ratio < 1:
            raise ValueError("exposure_ratio must lie in (0, 1)")
        if self.noise_var_input < 0 or self.halo_gain < 0:
            raise ValueError("noise variance and halo gain must be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sky_gradient"] = list(self.sky_gradient)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        if "sky_gradient" in d:
            d["sky_gradient"] = tuple(d["sky_gradient"])
        return cls(**d)


@dataclass
class StarCatalog:
    rows: np.ndarray
    cols: np.ndarray
    fluxes: np.ndarray
    colors: np.ndarray  # (n, 3), channel mean 1

    def __len__(self) -> int:
        return len(self.fluxes)


# ---------------------------------------------------------------- pieces

def horizon_profile(spec: SceneSpec, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Integer horizon row per column from a bounded random walk."""
    rng = np.random.default_rng(spec.landscape_seed) if rng is None else rng
    H, W = spec.height, spec.width
    lo, hi = HORIZON_BAND[0] * H, HORIZON_BAND[1] * H
    h = np.empty(W)
    h[0] = rng.uniform(0.5 * H, 0.7 * H)
    steps = rng.normal(0.0, 0.3 + 0.01 * H, size=W)
    for c in range(1, W):
        h[c] = min(max(h[c - 1] + steps[c], lo), hi)
    rows = np.clip(np.round(h), math.ceil(lo), math.floor(hi)).astype(int)
    return np.clip(rows, 1, H - 1) if H > 1 else rows


def render_landscape_mask(spec: SceneSpec, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """(H, W) float mask: 1 on landscape, 0 on sky."""
    rows = horizon_profile(spec, rng)
    r = np.arange(spec.height)[:, None]
    return (r >= rows[None, :]).astype(np.float64)


def sky_background(spec: SceneSpec) -> np.ndarray:
    top, horizon = spec.sky_gradient
    H = spec.height
    frac = np.arange(H) / (H - 1) if H > 1 else np.zeros(1)
    lum = top + (horizon - top) * frac
    return lum[:, None, None] * SKY_TINT[None, None, :] * np.ones((1, spec.width, 1))


def landscape_texture(spec: SceneSpec) -> np.ndarray:
    """Smooth (H, W) texture with mean close to 1 for the ground."""
    rng = np.random.default_rng([spec.landscape_seed, 1])
    field = ndimage.gaussian_filter(rng.normal(size=(spec.height, spec.width)), 2.0, mode="wrap")
    field /= field.std() + 1e-12
    return np.clip(1.0 + 0.35 * field, 0.2, 2.0)


def sample_stars(spec: SceneSpec, rng: np.random.Generator) -> StarCatalog:
    """Uniform positions over the sky area, truncated power-law fluxes."""
    n = spec.star_count
    horizon = horizon_profile(spec)
    weights = horizon / horizon.sum()
    cols_i = rng.choice(spec.width, size=n, p=weights)
    cols = cols_i + rng.random(n)
    rows = rng.random(n) * horizon[cols_i]
    a = spec.brightness_exponent + 1.0
    u = rng.random(n)
    if abs(a) < 1e-12:
        fluxes = spec.flux_min * (spec.flux_max / spec.flux_min) ** u
    else:
        lo, hi = spec.flux_min ** a, spec.flux_max ** a
        fluxes = (lo + u * (hi - lo)) ** (1.0 / a)
    jitter = rng.uniform(-0.15, 0.15, size=n)
    colors = np.stack([1 + jitter, np.ones(n), 1 - jitter], axis=1)
    return StarCatalog(rows, cols, fluxes, colors)


def _psf_weights(center: float, sigma: float, radius: int) -> tuple[int, np.ndarray]:
    """Pixel-integrated 1-D Gaussian over [floor(c)-radius, floor(c)+radius]."""
    start = int(math.floor(center)) - radius
    edges = np.arange(start, start + 2 * radius + 2, dtype=np.float64)
    cdf = 0.5 * (1 + erf((edges - center) / (sigma * math.sqrt(2))))
    w = np.diff(cdf)
    return start, w / w.sum()


def splat(img: np.ndarray, row: float, col: float, flux: float, sigma: float,
          color: np.ndarray) -> None:
    """Add a normalized Gaussian spot in place; the part falling off-image is lost."""
    H, W = img.shape[:2]
    radius = int(math.ceil(4 * sigma)) + 1
    r0, wr = _psf_weights(row, sigma, radius)
    c0, wc = _psf_weights(col, sigma, radius)
    patch = flux * np.outer(wr, wc)
    rs, re = max(r0, 0), min(r0 + len(wr), H)
    cs, ce = max(c0, 0), min(c0 + len(wc), W)
    if rs >= re or cs >= ce:
        return
    img[rs:re, cs:ce] += patch[rs - r0:re - r0, cs - c0:ce - c0, None] * color[None, None, :]


def star_layer(spec: SceneSpec, catalog: StarCatalog, role: str) -> np.ndarray:
    if role not in ("input", "reference"):
        raise ValueError(f"role must be 'input' or 'reference', got {role!r}")
    layer = np.zeros((spec.height, spec.width, 3))
    sigma = spec.psf_sigma_input if role == "input" else spec.psf_sigma_reference
    for r, c, f, col in zip(catalog.rows, catalog.cols, catalog.fluxes, catalog.colors):
        splat(layer, r, c, f, sigma, col)
    if role == "reference" and spec.halo_gain > 0 and len(catalog):
        cut = np.quantile(catalog.fluxes, 0.75)
        for r, c, f in zip(catalog.rows, catalog.cols, catalog.fluxes):
            if f >= cut:
                splat(layer, r, c, spec.halo_gain * f, spec.halo_sigma, HALO_TINT)
    return layer


# ---------------------------------------------------------------- renderers

def render_starfield(spec: SceneSpec, rng: np.random.Generator, role: str = "reference") -> np.ndarray:
    """Sky gradient plus stars for one role. Star positions depend only on ``rng``,
    so two renders from equally seeded generators line up across roles."""
    catalog = sample_stars(spec, rng)
    return np.clip(sky_background(spec) + star_layer(spec, catalog, role), 0.0, 1.0)


def render_pair(spec: SceneSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    spec.validate()
    catalog = sample_stars(spec, rng)
    mask = render_landscape_mask(spec)[..., None]
    sky = sky_background(spec)
    land = landscape_texture(spec)[..., None] * LAND_TINT

    ref_sky = sky + star_layer(spec, catalog, "reference")
    reference = (1 - mask) * ref_sky + mask * spec.landscape_luminance_reference * land

    in_sky = sky + star_layer(spec, catalog, "input")
    inp = (1 - mask) * in_sky + mask * spec.landscape_luminance_input * land
    inp = spec.exposure_ratio * inp
    if spec.noise_var_input > 0:
        inp = inp + rng.normal(0.0, math.sqrt(spec.noise_var_input) / 255.0, size=inp.shape)
    return np.clip(inp, 0.0, 1.0), np.clip(reference, 0.0, 1.0)


# ---------------------------------------------------------------- datasets

# (low, high) per SceneSpec field; star_count is per 4096 pixels, scaled by area
DEFAULT_RANGES: dict[str, tuple[float, float]] = {
    "star_count": (40, 160),
    "psf_sigma_input": (0.5, 0.8),
    "psf_sigma_reference": (0.9, 1.3),
    "halo_sigma": (2.0, 4.0),
    "halo_gain": (0.3, 0.9),
    "sky_top": (0.02, 0.06),
    "sky_horizon": (0.08, 0.18),
    "landscape_luminance_reference": (0.25, 0.45),
    # input landscape luminance = dimming * reference luminance
    "landscape_dimming": (0.4, 0.6),
    "exposure_ratio": (0.25, 0.35),
    "noise_var_input": (5.0, 40.0),
}


def sample_spec(ranges: dict, size: int, rng: np.random.Generator) -> SceneSpec:
    r = {**DEFAULT_RANGES, **ranges}
    for k, (lo, hi) in r.items():
        if lo > hi:
            raise ValueError(f"range for {k} has low > high")

    def u(k):
        return float(rng.uniform(*r[k]))

    density = u("star_count")
    land_ref = u("landscape_luminance_reference")
    spec = SceneSpec(
        width=size, height=size,
        star_count=int(round(density * size * size / 4096)),
        psf_sigma_input=u("psf_sigma_input"),
        psf_sigma_reference=u("psf_sigma_reference"),
        halo_sigma=u("halo_sigma"),
        halo_gain=u("halo_gain"),
        sky_gradient=(u("sky_top"), u("sky_horizon")),
        landscape_seed=int(rng.integers(2**31)),
        landscape_luminance_reference=land_ref,
        landscape_luminance_input=land_ref * u("landscape_dimming"),
        exposure_ratio=u("exposure_ratio"),
        noise_var_input=u("noise_var_input"),
    )
    if spec.psf_sigma_reference < spec.psf_sigma_input:
        spec = replace(spec, psf_sigma_reference=spec.psf_sigma_input)
    spec.validate()
    return spec


def pair_seed(seed: int, pair_index: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(pair_index)]).generate_state(1)[0])


def generate_dataset(n_pairs: int, out_dir: Union[str, Path], seed: int = 0, size: int = 64,
                     ranges: Optional[dict] = None) -> Path:
    """Render ``n_pairs`` pairs into ``out_dir`` and return the manifest path."""
    if n_pairs < 1:
        raise ValueError("n_pairs must be >= 1")
    if size < 1:
        raise ValueError("size must be positive")
    out = Path(out_dir)
    try:
        (out / "input").mkdir(parents=True, exist_ok=True)
        (out / "reference").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot write to {out}: {exc}") from exc
    entries = []
    for i in range(n_pairs):
        ps = pair_seed(seed, i)
        rng = np.random.default_rng(ps)
        spec = sample_spec(ranges or {}, size, rng)
        inp, ref = render_pair(spec, rng)
        pid = f"pair_{i:05d}"
        save_png(out / "input" / f"{pid}.png", inp)
        save_png(out / "reference" / f"{pid}.png", ref)
        entries.append(ManifestEntry(pid, f"input/{pid}.png", f"reference/{pid}.png", spec.to_dict(), ps))
    manifest = out / "manifest.jsonl"
    write_manifest(manifest, entries)
    return manifest

