"""Variance schedule for the diffusion process.

All public accessors use 1-based step indices, t = 1..T.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta_start: float
    beta_end: float
    betas: np.ndarray = field(repr=False)
    alphas: np.ndarray = field(repr=False)
    alpha_bars: np.ndarray = field(repr=False)
    posterior_vars: np.ndarray = field(repr=False)
    # square roots and ratios used by the samplers, derived at extended precision
    # so that 1 - alpha_bar keeps its digits near t = 1
    sqrt_alphas: np.ndarray = field(repr=False, default=None)
    sqrt_betas: np.ndarray = field(repr=False, default=None)
    sqrt_alpha_bars: np.ndarray = field(repr=False, default=None)
    sqrt_one_minus_alpha_bars: np.ndarray = field(repr=False, default=None)
    eps_coefs: np.ndarray = field(repr=False, default=None)
    sqrt_posterior_vars: np.ndarray = field(repr=False, default=None)

    def _check(self, t: int) -> int:
        if not (1 <= int(t) <= self.T):
            raise ValueError(f"step index {t} outside [1, {self.T}]")
        return int(t) - 1

    def beta(self, t: int) -> float:
        return float(self.betas[self._check(t)])

    def alpha(self, t: int) -> float:
        return float(self.alphas[self._check(t)])

    def alpha_bar(self, t: int) -> float:
        """Cumulative signal retention; ``alpha_bar(0)`` is 1 by convention."""
        if int(t) == 0:
            return 1.0
        return float(self.alpha_bars[self._check(t)])

    def to_dict(self) -> dict[str, Any]:
        return {"shape": "linear", "T": self.T,
                "beta_start": self.beta_start, "beta_end": self.beta_end}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "NoiseSchedule":
        if d.get("shape", "linear") != "linear":
            raise ValueError(f"unsupported schedule shape {d.get('shape')!r}")
        return make_linear_schedule(int(d["T"]), float(d["beta_start"]), float(d["beta_end"]))


def make_linear_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if int(T) != T or T < 1:
        raise ValueError(f"T must be a positive integer, got {T}")
    if not (0.0 < beta_start < 1.0 and 0.0 < beta_end < 1.0):
        raise ValueError("beta values must lie in (0, 1)")
    if beta_start > beta_end:
        raise ValueError("beta_start must not exceed beta_end")
    if T > 1 and beta_start == beta_end:
        raise ValueError("betas must be strictly increasing; use beta_start < beta_end for T > 1")

    # accumulate in extended precision; a 1000-factor product drifts at float64
    wide = np.longdouble
    betas = np.linspace(wide(beta_start), wide(beta_end), T, dtype=wide).astype(np.float64)
    alphas = 1.0 - betas
    alpha_bars_w = np.cumprod(alphas.astype(wide))
    prev_w = np.concatenate([np.ones(1, dtype=wide), alpha_bars_w[:-1]])
    post_w = (1 - prev_w) / (1 - alpha_bars_w) * betas.astype(wide)

    alpha_bars = alpha_bars_w.astype(np.float64)
    if alpha_bars[-1] < np.finfo(np.float64).tiny:
        raise ValueError("schedule drives alpha_bar below the float64 normal range")
    posterior_vars = post_w.astype(np.float64)
    # the sampler coefficients start again from the betas themselves, since
    # float64 alphas carry an absolute rounding that is large next to beta_1
    betas_w = betas.astype(wide)
    exact_alphas = 1 - betas_w
    exact_bars = np.cumprod(exact_alphas)
    one_minus_w = 1 - exact_bars
    prev_one_minus = np.concatenate([np.zeros(1, dtype=wide), one_minus_w[:-1]])
    derived = {
        "sqrt_alphas": np.sqrt(exact_alphas),
        "sqrt_betas": np.sqrt(betas_w),
        "sqrt_alpha_bars": np.sqrt(exact_bars),
        "sqrt_one_minus_alpha_bars": np.sqrt(one_minus_w),
        "eps_coefs": betas_w / np.sqrt(one_minus_w),
        "sqrt_posterior_vars": np.sqrt(prev_one_minus / one_minus_w * betas_w),
    }
    derived = {k: v.astype(np.float64) for k, v in derived.items()}
    for arr in (betas, alphas, alpha_bars, posterior_vars, *derived.values()):
        arr.setflags(write=False)
    return NoiseSchedule(int(T), float(beta_start), float(beta_end),
                         betas, alphas, alpha_bars, posterior_vars, **derived)


def posterior_variance(schedule: NoiseSchedule, t: int) -> float:
    return float(schedule.posterior_vars[schedule._check(t)])
