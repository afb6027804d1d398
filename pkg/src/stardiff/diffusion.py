"""Forward noising, ancestral reverse steps and the epsilon-prediction loss.

Tensors are channel-first torch tensors, either (C, H, W) or batched
(N, C, H, W). Step indices are 1-based; a batch may carry one step per item
as an integer tensor of shape (N,).
"""
from __future__ import annotations

from typing import Callable, Optional, Union

import numpy as np
import torch

from .schedule import NoiseSchedule

Steps = Union[int, torch.Tensor]
# (y_t, x_cond, t) -> eps_hat; a Denoiser instance or any mock with that signature
EpsModel = Callable[[torch.Tensor, torch.Tensor, Steps], torch.Tensor]
CondFn = Callable[[torch.Tensor], torch.Tensor]


def _coef(table: np.ndarray, t: Steps, like: torch.Tensor, T: int) -> torch.Tensor:
    """Gather ``table[t-1]`` and shape it to broadcast against ``like``."""
    if isinstance(t, torch.Tensor) and t.ndim > 0:
        idx = t.detach().cpu().long()
        if idx.min() < 1 or idx.max() > T:
            raise ValueError(f"step indices must lie in [1, {T}]")
        vals = torch.tensor(np.asarray(table)[idx.numpy() - 1], dtype=torch.float64)
        if like.ndim != 4 or like.shape[0] != idx.shape[0]:
            raise ValueError("per-item steps need a batched (N, C, H, W) tensor of matching N")
        return vals.to(like.dtype).view(-1, 1, 1, 1)
    ti = int(t)
    if not 1 <= ti <= T:
        raise ValueError(f"step index {ti} outside [1, {T}]")
    return torch.tensor(float(table[ti - 1]), dtype=like.dtype)


def _same_shape(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def q_sample(y0: torch.Tensor, t: Steps, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """Draw y_t from q(y_t | y_0) given the noise ``eps``."""
    _same_shape(y0, eps, "q_sample")
    signal = _coef(schedule.sqrt_alpha_bars, t, y0, schedule.T)
    noise = _coef(schedule.sqrt_one_minus_alpha_bars, t, y0, schedule.T)
    return signal * y0 + noise * eps


def diffuse_step(y_prev: torch.Tensor, t: Steps, schedule: NoiseSchedule,
                 generator: torch.Generator) -> torch.Tensor:
    """One forward Markov step q(y_t | y_{t-1})."""
    keep = _coef(schedule.sqrt_alphas, t, y_prev, schedule.T)
    noise = _coef(schedule.sqrt_betas, t, y_prev, schedule.T)
    z = torch.randn(y_prev.shape, generator=generator, dtype=y_prev.dtype)
    return keep * y_prev + noise * z


def predict_posterior_mean(y_t: torch.Tensor, eps_hat: torch.Tensor, t: Steps,
                           schedule: NoiseSchedule) -> torch.Tensor:
    _same_shape(y_t, eps_hat, "predict_posterior_mean")
    root_alpha = _coef(schedule.sqrt_alphas, t, y_t, schedule.T)
    eps_coef = _coef(schedule.eps_coefs, t, y_t, schedule.T)
    return (y_t - eps_coef * eps_hat) / root_alpha


def reverse_step(y_t: torch.Tensor, x_cond: torch.Tensor, t: int, denoiser: EpsModel,
                 schedule: NoiseSchedule, generator: torch.Generator) -> torch.Tensor:
    """Sample y_{t-1} from the learned reverse Gaussian; no noise at t = 1."""
    if y_t.shape[-3] != 3 or x_cond.shape[-3] != 3:
        raise ValueError("reverse_step expects 3-channel state and condition")
    _same_shape(y_t, x_cond, "reverse_step")
    t = int(t)
    with torch.no_grad():
        eps_hat = denoiser(y_t, x_cond, t)
    mean = predict_posterior_mean(y_t, eps_hat, t, schedule)
    if t == 1:
        return mean
    z = torch.randn(y_t.shape, generator=generator, dtype=y_t.dtype)
    sigma = _coef(schedule.sqrt_posterior_vars, t, y_t, schedule.T)
    return mean + sigma * z


def training_loss(denoiser: EpsModel, y0: torch.Tensor, x_cond: torch.Tensor, t: Steps,
                  eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """Mean squared error between the injected noise and its prediction."""
    _same_shape(y0, eps, "training_loss")
    _same_shape(y0, x_cond, "training_loss")
    y_t = q_sample(y0, t, eps, schedule)
    eps_hat = denoiser(y_t, x_cond, t)
    return torch.mean((eps - eps_hat) ** 2)


def sample_steps(n: int, schedule: NoiseSchedule, generator: torch.Generator) -> torch.Tensor:
    """Uniform training steps in {1, ..., T}."""
    return torch.randint(1, schedule.T + 1, (n,), generator=generator)


def enhance(x_cond: torch.Tensor, denoiser: EpsModel, schedule: NoiseSchedule,
            generator: torch.Generator, condition_fn: Optional[CondFn] = None) -> torch.Tensor:
    """Full ancestral sampling from y_T ~ N(0, I) down to y_0.

    ``condition_fn``, when given, is applied to ``x_cond`` before every
    reverse step (fresh corruption per step). Only the final output is
    clamped to [-1, 1].
    """
    if x_cond.shape[-3] != 3:
        raise ValueError("condition must have 3 channels")
    y = torch.randn(x_cond.shape, generator=generator, dtype=x_cond.dtype)
    for t in range(schedule.T, 0, -1):
        cond = condition_fn(x_cond) if condition_fn is not None else x_cond
        y = reverse_step(y, cond, t, denoiser, schedule, generator)
    return y.clamp(-1.0, 1.0)
