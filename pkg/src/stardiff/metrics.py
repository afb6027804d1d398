"""PSNR and SSIM on unit-range (H, W, C) images."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

import numpy as np
from scipy import ndimage

PSNR_CAP_DB = 100.0
K1, K2 = 0.01, 0.03
WINDOW, WINDOW_SIGMA = 11, 1.5


def _check(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for peak value 1; ``inf`` for identical images."""
    a, b = _check(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def _window() -> np.ndarray:
    r = np.arange(WINDOW) - WINDOW // 2
    g = np.exp(-(r ** 2) / (2 * WINDOW_SIGMA ** 2))
    return g / g.sum()


def _filter_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    # separable Gaussian, keeping only windows that fit entirely in the image
    h = len(g) // 2
    y = ndimage.correlate1d(x, g, axis=0, mode="constant")
    y = ndimage.correlate1d(y, g, axis=1, mode="constant")
    return y[h:-h, h:-h]


def ssim_map(a: np.ndarray, b: np.ndarray, data_range: float = 1.0) -> np.ndarray:
    a, b = _check(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if min(a.shape[:2]) < WINDOW:
        raise ValueError(f"image {a.shape[:2]} smaller than the {WINDOW}x{WINDOW} window")
    g = _window()
    c1 = (K1 * data_range) ** 2
    c2 = (K2 * data_range) ** 2
    maps = []
    for ch in range(a.shape[2]):
        x, y = a[..., ch], b[..., ch]
        mu_x, mu_y = _filter_valid(x, g), _filter_valid(y, g)
        mu_xy = mu_x * mu_y
        var_x = _filter_valid(x * x, g) - mu_x * mu_x
        var_y = _filter_valid(y * y, g) - mu_y * mu_y
        cov = _filter_valid(x * y, g) - mu_xy
        num = (2 * mu_xy + c1) * (2 * cov + c2)
        den = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
        maps.append(num / den)
    return np.stack(maps, axis=-1)


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean SSIM, 11x11 Gaussian window (sigma 1.5), per channel then averaged."""
    m = ssim_map(a, b)
    return float(np.mean([m[..., c].mean() for c in range(m.shape[-1])]))


def capped(v: float) -> float:
    return min(v, PSNR_CAP_DB)


@dataclass
class MetricReport:
    per_image: list[tuple[str, float, float]] = field(default_factory=list)

    def add(self, pair_id: str, p: float, s: float) -> None:
        self.per_image.append((pair_id, p, s))

    @property
    def psnr_db(self) -> float:
        if not self.per_image:
            return math.nan
        return float(np.mean([capped(p) for _, p, _ in self.per_image]))

    @property
    def ssim(self) -> float:
        if not self.per_image:
            return math.nan
        return float(np.mean([s for _, _, s in self.per_image]))

    CSV_COLUMNS = ("pair_id", "psnr_db", "ssim")

    def write_csv(self, path: Union[str, Path]) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(self.CSV_COLUMNS)
            for pid, p, s in self.per_image:
                w.writerow([pid, f"{capped(p):.4f}", f"{s:.4f}"])
            w.writerow(["mean", f"{self.psnr_db:.4f}", f"{self.ssim:.4f}"])

    def table(self) -> str:
        lines = [f"{'pair':<16} {'PSNR (dB)':>10} {'SSIM':>8}"]
        for pid, p, s in self.per_image:
            lines.append(f"{pid:<16} {capped(p):>10.4f} {s:>8.4f}")
        lines.append(f"{'mean':<16} {self.psnr_db:>10.4f} {self.ssim:>8.4f}")
        return "\n".join(lines)


def evaluate_pairs(pairs, quantize_8bit: bool = True) -> MetricReport:
    """``pairs`` yields (pair_id, prediction, reference) unit-range images."""
    rep = MetricReport()
    for pid, pred, ref in pairs:
        if quantize_8bit:
            pred = np.round(np.clip(pred, 0, 1) * 255) / 255
            ref = np.round(np.clip(ref, 0, 1) * 255) / 255
        rep.add(pid, psnr(pred, ref), ssim(pred, ref))
    return rep
