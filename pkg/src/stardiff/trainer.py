"""Cascaded training: phases of growing patch size, each warm-started from the
previous phase, with a per-phase cosine learning-rate anneal and Adam."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import torch

from . import corruption as corr
from .dataio import random_crop_pair, resize, to_model_range, to_tensor
from .denoiser import DenoiserConfig, Denoiser, init_denoiser, load_checkpoint, save_checkpoint
from .diffusion import sample_steps, training_loss
from .schedule import NoiseSchedule
from .seeding import derive_seed

log = logging.getLogger(__name__)

Pair = tuple[np.ndarray, np.ndarray]


@dataclass(frozen=True)
class PhaseConfig:
    patch_size: int
    batch_size: int
    epochs: int

    def __post_init__(self):
        if self.patch_size < 8 or self.patch_size % 8:
            raise ValueError(f"patch size must be a positive multiple of 8, got {self.patch_size}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be positive")


@dataclass(frozen=True)
class TrainConfig:
    phases: tuple[PhaseConfig, ...]
    lr_start: float = 1e-4
    lr_end: float = 1e-6
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    corruption: corr.CorruptionSpec = field(default_factory=lambda: corr.preset("paper-cutout"))
    seed: int = 0
    hflip: bool = True
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)

    def __post_init__(self):
        if not self.phases:
            raise ValueError("at least one phase is required")
        for a, b in zip(self.phases, self.phases[1:]):
            if b.patch_size <= a.patch_size:
                raise ValueError("phase patch sizes must be strictly increasing")
            if b.batch_size > a.batch_size:
                raise ValueError("phase batch sizes must be non-increasing")
        if not self.lr_start > self.lr_end > 0:
            raise ValueError("need lr_start > lr_end > 0")

    def to_dict(self) -> dict:
        return {
            "phases": [asdict(p) for p in self.phases],
            "lr_start": self.lr_start, "lr_end": self.lr_end,
            "optimizer": {"name": "adam", "betas": list(self.betas), "eps": self.eps},
            "corruption": self.corruption.to_dict(),
            "seed": self.seed, "hflip": self.hflip,
            "denoiser": self.denoiser.to_dict(),
            "lr_schedule": "cosine, restarted per phase",
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        opt = d.get("optimizer", {})
        return cls(
            phases=tuple(PhaseConfig(**p) for p in d["phases"]),
            lr_start=float(d["lr_start"]), lr_end=float(d["lr_end"]),
            betas=tuple(opt.get("betas", (0.9, 0.999))), eps=float(opt.get("eps", 1e-8)),
            corruption=corr.resolve(d.get("corruption")),
            seed=int(d.get("seed", 0)), hflip=bool(d.get("hflip", True)),
            denoiser=DenoiserConfig.from_dict(d["denoiser"]) if "denoiser" in d else DenoiserConfig(),
        )


DESK_PHASES = (PhaseConfig(32, 64, 100), PhaseConfig(64, 16, 50), PhaseConfig(128, 4, 10))
PAPER_PHASES = (PhaseConfig(160, 16, 10000), PhaseConfig(320, 4, 5000), PhaseConfig(640, 1, 1000))


def lr_at(step: int, total_steps: int, lr_start: float, lr_end: float) -> float:
    if total_steps < 1:
        raise ValueError("total_steps must be >= 1")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return lr_end + 0.5 * (lr_start - lr_end) * (1 + math.cos(math.pi * step / total_steps))


def steps_per_epoch(n_pairs: int, batch_size: int) -> int:
    return max(1, math.ceil(n_pairs / batch_size))


def fit_pairs_to_patch(pairs: Sequence[Pair], patch_size: int) -> list[Pair]:
    """Bilinearly upscale pairs whose shorter side is below the patch size."""
    out = []
    small = 0
    for inp, ref in pairs:
        H, W = inp.shape[:2]
        if min(H, W) < patch_size:
            small += 1
            scale = patch_size / min(H, W)
            h, w = max(patch_size, round(H * scale)), max(patch_size, round(W * scale))
            inp, ref = np.clip(resize(inp, h, w), 0, 1), np.clip(resize(ref, h, w), 0, 1)
        out.append((inp, ref))
    if small:
        log.warning("upscaled %d of %d pairs to fit %d px patches", small, len(out), patch_size)
    return out


def make_batch(pairs: Sequence[Pair], phase: PhaseConfig, spec: corr.CorruptionSpec,
               rng: np.random.Generator, hflip: bool = True) -> tuple[torch.Tensor, torch.Tensor]:
    """Random crops of random pairs; returns (condition, target) in model range."""
    conds, targets = [], []
    for _ in range(phase.batch_size):
        inp, ref = pairs[int(rng.integers(len(pairs)))]
        a, b = random_crop_pair(inp, ref, phase.patch_size, rng)
        if hflip and rng.random() < 0.5:
            a, b = a[:, ::-1], b[:, ::-1]
        if spec.enabled:
            a = corr.corrupt(a, spec, rng)
        conds.append(to_model_range(a))
        targets.append(to_model_range(b))
    return to_tensor(np.stack(conds)), to_tensor(np.stack(targets))


def train_phase(state: Denoiser, pairs: Sequence[Pair], phase: PhaseConfig, config: TrainConfig,
                schedule: NoiseSchedule, phase_index: int = 1,
                max_steps: Optional[int] = None) -> tuple[Denoiser, list[dict]]:
    """Run one phase in place on ``state``; returns it with per-step loss records.

    Random streams depend only on (config.seed, phase_index), so a phase
    resumed from the previous phase's checkpoint replays identically.
    """
    if not pairs:
        raise ValueError("dataset is empty")
    pairs = fit_pairs_to_patch(pairs, phase.patch_size)

    total = phase.epochs * steps_per_epoch(len(pairs), phase.batch_size)
    if max_steps is not None:
        total = min(total, max_steps)
    np_rng = np.random.default_rng(derive_seed(config.seed, "train", "batch", phase_index))
    gen = torch.Generator().manual_seed(derive_seed(config.seed, "train", "noise", phase_index))
    opt = torch.optim.Adam(state.parameters(), lr=config.lr_start, betas=config.betas, eps=config.eps)
    state.train()
    history = []
    for step in range(total):
        lr = lr_at(step, total, config.lr_start, config.lr_end)
        for g in opt.param_groups:
            g["lr"] = lr
        cond, target = make_batch(pairs, phase, config.corruption, np_rng, config.hflip)
        t = sample_steps(target.shape[0], schedule, gen)
        eps = torch.randn(target.shape, generator=gen, dtype=target.dtype)
        loss = training_loss(state, target, cond, t, eps, schedule)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        history.append({"step": step, "phase": phase_index, "lr": lr, "loss": float(loss.detach())})
        if step % 50 == 0:
            log.info("phase %d step %d/%d lr %.3g loss %.5f", phase_index, step, total, lr, history[-1]["loss"])
    state.eval()
    return state, history


def write_loss_csv(path: Union[str, Path], history: list[dict]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["step", "phase", "lr", "loss"])
        for h in history:
            w.writerow([h["step"], h["phase"], repr(h["lr"]), repr(h["loss"])])


def read_loss_csv(path: Union[str, Path]) -> list[dict]:
    with open(path, newline="") as f:
        return [{"step": int(r["step"]), "phase": int(r["phase"]), "lr": float(r["lr"]),
                 "loss": float(r["loss"])} for r in csv.DictReader(f)]


def phase_checkpoint(ckpt_dir: Union[str, Path], phase_index: int) -> Path:
    return Path(ckpt_dir) / f"phase_{phase_index}.npz"


def train_cascade(pairs: Sequence[Pair], config: TrainConfig, schedule: NoiseSchedule,
                  ckpt_dir: Optional[Union[str, Path]] = None, resume: bool = False,
                  stop_after: Optional[int] = None,
                  max_steps: Optional[int] = None) -> tuple[Denoiser, list[dict]]:
    """Chain the phases. With ``ckpt_dir`` a checkpoint and loss CSV are written
    after every phase; ``resume`` restarts after the last finished phase.
    ``stop_after`` ends the run after that many phases (used to emulate an
    interruption)."""
    start = 1
    state = None
    if ckpt_dir is not None:
        Path(ckpt_dir).mkdir(parents=True, exist_ok=True)
        if resume:
            for k in range(len(config.phases), 0, -1):
                if phase_checkpoint(ckpt_dir, k).is_file():
                    state, _ = load_checkpoint(phase_checkpoint(ckpt_dir, k))
                    start = k + 1
                    log.info("resuming after phase %d", k)
                    break
    if state is None:
        state = init_denoiser(config.denoiser, derive_seed(config.seed, "init"))

    history: list[dict] = []
    if ckpt_dir is not None:
        for k in range(1, start):
            history += read_loss_csv(Path(ckpt_dir) / f"loss_phase_{k}.csv")
    for k in range(start, len(config.phases) + 1):
        if stop_after is not None and k > stop_after:
            break
        state, h = train_phase(state, pairs, config.phases[k - 1], config, schedule, k, max_steps)
        history += h
        if ckpt_dir is not None:
            save_checkpoint(phase_checkpoint(ckpt_dir, k), state,
                            {"phase": k, "schedule": schedule.to_dict(), "train": config.to_dict()})
            write_loss_csv(Path(ckpt_dir) / f"loss_phase_{k}.csv", h)
    if ckpt_dir is not None:
        write_loss_csv(Path(ckpt_dir) / "losses.csv", history)
    return state, history


def code_digest() -> str:
    """sha256 over this package's source files, in path order."""
    h = hashlib.sha256()
    root = Path(__file__).parent
    for p in sorted(root.rglob("*.py")):
        h.update(p.relative_to(root).as_posix().encode())
        h.update(p.read_bytes())
    return h.hexdigest()


def write_run_manifest(path: Union[str, Path], config: TrainConfig, schedule: NoiseSchedule,
                       dataset_digest: str) -> None:
    rec = {
        "train": config.to_dict(),
        "schedule": schedule.to_dict(),
        "dataset_sha256": dataset_digest,
        "code_sha256": code_digest(),
    }
    Path(path).write_text(json.dumps(rec, indent=2, sort_keys=True) + "\n")


def with_phases(config: TrainConfig, phases: Sequence[PhaseConfig]) -> TrainConfig:
    return replace(config, phases=tuple(phases))
