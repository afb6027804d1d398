"""Dynamic stochastic corruption of the condition image.

Images are float arrays of shape (H, W, C) in unit range [0, 1]. Every call to
``corrupt`` draws fresh parameters from the generator it is given, so repeated
calls on the same image produce different corruptions.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from typing import Any, Optional, Sequence

import numpy as np
from scipy import ndimage

KINDS = ("noise", "blur", "cutout")

PAPER_BLUR_TABLE = ((3, 0.8), (5, 1.1), (7, 1.4))


@dataclass(frozen=True)
class CorruptionSpec:
    enabled: tuple[str, ...] = ()
    apply_probability: dict[str, float] = field(default_factory=dict)
    noise_var_range: tuple[float, float] = (10.0, 100.0)
    blur_table: tuple[tuple[int, float], ...] = PAPER_BLUR_TABLE
    cutout_count_range: tuple[int, int] = (1, 100)
    cutout_side_range: tuple[int, int] = (4, 32)
    fill_value: float = 0.0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for k in self.enabled:
            if k not in KINDS:
                raise ValueError(f"unknown corruption {k!r}")
            p = self.probability(k)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"probability for {k} must be in [0, 1], got {p}")
        lo, hi = self.noise_var_range
        if not 0 <= lo <= hi:
            raise ValueError("noise_var_range must satisfy 0 <= low <= high")
        if not self.blur_table:
            raise ValueError("blur_table must not be empty")
        for k, s in self.blur_table:
            if k < 3 or k % 2 == 0:
                raise ValueError(f"blur kernel size must be odd and >= 3, got {k}")
            if s <= 0:
                raise ValueError(f"blur sigma must be positive, got {s}")
        cmin, cmax = self.cutout_count_range
        smin, smax = self.cutout_side_range
        if cmin < 1 or cmax < cmin:
            raise ValueError("cutout_count_range must satisfy 1 <= min <= max")
        if smin < 1 or smax < smin:
            raise ValueError("cutout_side_range must satisfy 1 <= min <= max")
        if not 0.0 <= self.fill_value <= 1.0:
            raise ValueError("fill_value must be in unit range")

    def probability(self, kind: str) -> float:
        return float(self.apply_probability.get(kind, 0.0))

    def with_probability(self, p: float) -> "CorruptionSpec":
        return replace(self, apply_probability={k: p for k in self.enabled})

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["enabled"] = list(self.enabled)
        d["blur_table"] = [list(kv) for kv in self.blur_table]
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "CorruptionSpec":
        return cls(
            enabled=tuple(d.get("enabled", ())),
            apply_probability={k: float(v) for k, v in d.get("apply_probability", {}).items()},
            noise_var_range=tuple(d.get("noise_var_range", (10.0, 100.0))),
            blur_table=tuple((int(k), float(s)) for k, s in d.get("blur_table", PAPER_BLUR_TABLE)),
            cutout_count_range=tuple(int(v) for v in d.get("cutout_count_range", (1, 100))),
            cutout_side_range=tuple(int(v) for v in d.get("cutout_side_range", (4, 32))),
            fill_value=float(d.get("fill_value", 0.0)),
        )


def preset(name: str) -> CorruptionSpec:
    """Named corruption presets.

    ``none`` disables everything, ``paper`` enables all three operators at
    probability 0.5, and ``paper-noise`` / ``paper-blur`` / ``paper-cutout``
    enable a single operator at probability 0.5 (the ablation arms).
    """
    if name == "none":
        return CorruptionSpec()
    if name == "paper":
        return CorruptionSpec(enabled=KINDS, apply_probability={k: 0.5 for k in KINDS})
    if name.startswith("paper-") and name[6:] in KINDS:
        kind = name[6:]
        return CorruptionSpec(enabled=(kind,), apply_probability={kind: 0.5})
    raise ValueError(f"unknown corruption preset {name!r}")


def resolve(spec: "CorruptionSpec | str | dict | None") -> CorruptionSpec:
    if spec is None:
        return CorruptionSpec()
    if isinstance(spec, CorruptionSpec):
        return spec
    if isinstance(spec, str):
        return preset(spec)
    return CorruptionSpec.from_dict(spec)


# ---------------------------------------------------------------- operators

def add_gaussian_noise(x: np.ndarray, variance_8bit: float, rng: np.random.Generator) -> np.ndarray:
    """Add zero-mean Gaussian noise whose variance is given on the 0..255 scale."""
    if variance_8bit < 0:
        raise ValueError("noise variance must be non-negative")
    if variance_8bit == 0:
        return x.copy()
    sigma = np.sqrt(variance_8bit) / 255.0
    out = x + rng.normal(0.0, sigma, size=x.shape)
    return np.clip(out, 0.0, 1.0)


def gaussian_kernel1d(kernel_size: int, sigma: float) -> np.ndarray:
    if kernel_size < 3 or kernel_size % 2 == 0:
        raise ValueError(f"kernel size must be odd and >= 3, got {kernel_size}")
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    r = np.arange(kernel_size, dtype=np.float64) - kernel_size // 2
    k = np.exp(-0.5 * (r / sigma) ** 2)
    return k / k.sum()


def apply_gaussian_blur(x: np.ndarray, kernel_size: int, sigma: float) -> np.ndarray:
    k = gaussian_kernel1d(kernel_size, sigma)
    # 'mirror' reflects about the edge pixel without repeating it
    out = ndimage.correlate1d(np.asarray(x, dtype=np.float64), k, axis=0, mode="mirror")
    out = ndimage.correlate1d(out, k, axis=1, mode="mirror")
    return np.clip(out, 0.0, 1.0)


def apply_cutout(x: np.ndarray, count: int, sides: Sequence[tuple[int, int]],
                 positions: Sequence[tuple[int, int]], fill_value: float = 0.0) -> np.ndarray:
    """Fill ``count`` rectangles with ``fill_value``.

    ``positions`` are top-left corners and may lie partly outside the image;
    rectangles are clipped to the image bounds.
    """
    if not count == len(sides) == len(positions):
        raise ValueError("count, sides and positions must agree in length")
    out = np.array(x, dtype=np.float64, copy=True)
    H, W = out.shape[:2]
    for (h, w), (r, c) in zip(sides, positions):
        r0, c0 = max(int(r), 0), max(int(c), 0)
        r1, c1 = min(int(r) + int(h), H), min(int(c) + int(w), W)
        if r1 > r0 and c1 > c0:
            out[r0:r1, c0:c1] = fill_value
    return out


# ---------------------------------------------------------------- sampling

@dataclass
class CorruptionDraw:
    """Concrete parameters drawn for one ``corrupt`` call."""
    noise_var: Optional[float] = None
    blur: Optional[tuple[int, float]] = None
    cutout_sides: list[tuple[int, int]] = field(default_factory=list)
    cutout_positions: list[tuple[int, int]] = field(default_factory=list)

    @property
    def cutout_count(self) -> int:
        return len(self.cutout_sides)


def sample_corruption(spec: CorruptionSpec, shape: tuple[int, ...],
                      rng: np.random.Generator) -> CorruptionDraw:
    H, W = shape[:2]
    draw = CorruptionDraw()
    # one uniform per operator first, so each firing decision is independent
    fire = {k: rng.random() < spec.probability(k) for k in KINDS if k in spec.enabled}
    if fire.get("noise"):
        draw.noise_var = float(rng.uniform(*spec.noise_var_range))
    if fire.get("blur"):
        i = int(rng.integers(len(spec.blur_table)))
        draw.blur = tuple(spec.blur_table[i])
    if fire.get("cutout"):
        n = int(rng.integers(spec.cutout_count_range[0], spec.cutout_count_range[1] + 1))
        smin, smax = spec.cutout_side_range
        smax_h, smax_w = min(smax, H), min(smax, W)
        hs = rng.integers(min(smin, smax_h), smax_h + 1, size=n)
        ws = rng.integers(min(smin, smax_w), smax_w + 1, size=n)
        # centres uniform over the image, then clipped as in the original cutout
        cy = rng.integers(0, H, size=n)
        cx = rng.integers(0, W, size=n)
        draw.cutout_sides = [(int(h), int(w)) for h, w in zip(hs, ws)]
        draw.cutout_positions = [(int(y - h // 2), int(x - w // 2)) for y, x, h, w in zip(cy, cx, hs, ws)]
    return draw


def apply_draw(x: np.ndarray, draw: CorruptionDraw, rng: np.random.Generator,
               fill_value: float = 0.0) -> np.ndarray:
    """Apply a drawn corruption in the fixed order noise, blur, cutout."""
    out = np.asarray(x, dtype=np.float64)
    if draw.noise_var is not None:
        out = add_gaussian_noise(out, draw.noise_var, rng)
    if draw.blur is not None:
        out = apply_gaussian_blur(out, *draw.blur)
    if draw.cutout_count:
        out = apply_cutout(out, draw.cutout_count, draw.cutout_sides, draw.cutout_positions, fill_value)
    return np.clip(out, 0.0, 1.0)


def corrupt(x: np.ndarray, spec: CorruptionSpec, rng: np.random.Generator,
            return_draw: bool = False):
    x = np.asarray(x, dtype=np.float64)
    if x.size and (x.min() < 0.0 or x.max() > 1.0):
        raise ValueError("corrupt expects a unit-range image")
    draw = sample_corruption(spec, x.shape, rng)
    out = apply_draw(x, draw, rng, spec.fill_value)
    return (out, draw) if return_draw else out
