"""Command-line entry point: gen-data, train, enhance, eval.

Every command resolves its full configuration first, writes it next to the
outputs, and derives per-subsystem seeds from one root seed, so a rerun with
the same flags reproduces the same files byte for byte.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np
import torch

from . import corruption as corr
from .dataio import (from_model_range, from_tensor, load_manifest, load_png, pad_to_multiple, save_png,
                     to_model_range, to_tensor)
from .denoiser import DESK_CONFIG, DenoiserConfig, load_checkpoint
from .diffusion import enhance
from .metrics import MetricReport, evaluate_pairs
from .schedule import NoiseSchedule
from .seeding import derive_seed
from .stargen import generate_dataset
from .trainer import (DESK_PHASES, PAPER_PHASES, PhaseConfig, TrainConfig, phase_checkpoint, train_cascade,
                      write_run_manifest)

log = logging.getLogger("stardiff")

OUT_ENV = "STARDIFF_OUT"
CORRUPTION_CHOICES = ("none", "paper", "paper-noise", "paper-blur", "paper-cutout")
ABLATION_ARMS = (("w/o corruption", "none"), ("w/ stochastic noise", "paper-noise"),
                 ("w/ stochastic blur", "paper-blur"), ("w/ stochastic cutout", "paper-cutout"))

PRESETS: dict[str, dict[str, Any]] = {
    "desk": {
        "schedule": {"shape": "linear", "T": 200, "beta_start": 1e-4, "beta_end": 0.06},
        "phases": [{"patch_size": p.patch_size, "batch_size": p.batch_size, "epochs": p.epochs} for p in DESK_PHASES],
        "lr_start": 2e-3, "lr_end": 2e-5,
        "denoiser": DESK_CONFIG.to_dict(),
    },
    "paper": {
        "schedule": {"shape": "linear", "T": 1000, "beta_start": 1e-4, "beta_end": 0.02},
        "phases": [{"patch_size": p.patch_size, "batch_size": p.batch_size, "epochs": p.epochs}
                   for p in PAPER_PHASES],
        "lr_start": 1e-4, "lr_end": 1e-6,
        "denoiser": DESK_CONFIG.to_dict(),
    },
}


class CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        print(f"stardiff: error: usage: {message}", file=sys.stderr)
        sys.exit(2)


def default_out(name: str) -> Path:
    return Path(os.environ.get(OUT_ENV, "runs")) / name


def write_json(path: Path, obj: Any) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------- gen-data

def cmd_gen_data(args) -> int:
    if args.pairs < 1:
        raise CliError("--pairs must be >= 1")
    ranges = json.loads(Path(args.ranges).read_text()) if args.ranges else {}
    out = Path(args.out or default_out("data"))
    manifest = generate_dataset(args.pairs, out, seed=derive_seed(args.seed, "data"), size=args.size,
                                ranges={k: tuple(v) for k, v in ranges.items()})
    print(f"{manifest}\t{args.pairs} pairs")
    return 0


# ---------------------------------------------------------------- train

def resolve_run_config(args) -> dict[str, Any]:
    """preset defaults < --config file < explicit flags"""
    cfg: dict[str, Any] = json.loads(json.dumps(PRESETS[args.preset]))
    cfg.update({"preset": args.preset, "corruption": "paper-cutout", "seed": 0, "hflip": True,
                "max_steps_per_phase": None, "holdout": 0})
    if args.config:
        user = json.loads(Path(args.config).read_text())
        unknown = set(user) - set(cfg)
        if unknown:
            raise CliError(f"unknown config keys: {', '.join(sorted(unknown))}")
        cfg.update(user)
    for key in ("corruption", "seed", "lr_start", "lr_end", "holdout"):
        if getattr(args, key, None) is not None:
            cfg[key] = getattr(args, key)
    if args.max_steps is not None:
        cfg["max_steps_per_phase"] = args.max_steps
    if args.epochs:
        epochs = [int(e) for e in args.epochs.split(",")]
        if len(epochs) != len(cfg["phases"]):
            raise CliError(f"--epochs needs {len(cfg['phases'])} comma-separated values")
        cfg["phases"] = [dict(p, epochs=e) for p, e in zip(cfg["phases"], epochs)]
    if args.steps is not None:
        cfg["schedule"] = dict(cfg["schedule"], T=args.steps)
    if isinstance(cfg["corruption"], str) and cfg["corruption"] not in CORRUPTION_CHOICES:
        raise CliError(f"unknown corruption preset {cfg['corruption']!r}")
    return cfg


def build_training(cfg: dict[str, Any]) -> tuple[TrainConfig, NoiseSchedule]:
    train = TrainConfig(
        phases=tuple(PhaseConfig(**p) for p in cfg["phases"]),
        lr_start=float(cfg["lr_start"]), lr_end=float(cfg["lr_end"]),
        corruption=corr.resolve(cfg["corruption"]),
        seed=derive_seed(int(cfg["seed"]), "train"),
        hflip=bool(cfg["hflip"]),
        denoiser=DenoiserConfig.from_dict(cfg["denoiser"]),
    )
    return train, NoiseSchedule.from_dict(cfg["schedule"])


def split_holdout(manifest, holdout: int):
    """The last ``holdout`` entries are kept out of training."""
    if holdout < 0 or holdout >= len(manifest):
        raise CliError(f"holdout must leave at least one training pair (have {len(manifest)})")
    ids = [e.pair_id for e in manifest]
    cut = len(ids) - holdout
    return manifest.subset(ids[:cut]), manifest.subset(ids[cut:])


def run_training(cfg: dict[str, Any], manifest_path: Path, out: Path, resume: bool = False,
                 stop_after: Optional[int] = None) -> Path:
    train_cfg, schedule = build_training(cfg)
    manifest = load_manifest(manifest_path)
    train_set, _ = split_holdout(manifest, int(cfg.get("holdout", 0)))
    out.mkdir(parents=True, exist_ok=True)
    config_path = out / "config.json"
    resolved = dict(cfg, manifest=str(manifest_path))
    if resume and config_path.is_file():
        if json.loads(config_path.read_text()) != json.loads(json.dumps(resolved)):
            raise CliError(f"{config_path} differs from the requested run; refusing to resume")
    write_json(config_path, resolved)
    write_run_manifest(out / "run_manifest.json", train_cfg, schedule, manifest.digest())
    train_cascade(train_set.load_pairs(), train_cfg, schedule, ckpt_dir=out, resume=resume,
                  stop_after=stop_after, max_steps=cfg.get("max_steps_per_phase"))
    done = [k for k in range(1, len(train_cfg.phases) + 1) if phase_checkpoint(out, k).is_file()]
    final = phase_checkpoint(out, done[-1])
    if len(done) == len(train_cfg.phases):
        shutil.copyfile(final, out / "model.npz")
    return final


def cmd_train(args) -> int:
    cfg = resolve_run_config(args)
    out = Path(args.out or default_out("train"))
    final = run_training(cfg, Path(args.manifest), out, resume=args.resume, stop_after=args.stop_after)
    print(final)
    return 0


# ---------------------------------------------------------------- enhance

def enhance_image(model, schedule: NoiseSchedule, image: np.ndarray, seed: int,
                  sampling_corruption: Optional[corr.CorruptionSpec] = None) -> np.ndarray:
    """Unit-range (H, W, 3) in, unit-range out; sizes not divisible by 8 are
    reflect-padded and cropped back."""
    padded, (H, W) = pad_to_multiple(image, 8)
    x = to_tensor(to_model_range(padded))[None]
    condition_fn = None
    if sampling_corruption is not None and sampling_corruption.enabled:
        rng = np.random.default_rng(derive_seed(seed, "corrupt"))

        def condition_fn(xc):
            unit = from_model_range(from_tensor(xc[0]))
            return to_tensor(to_model_range(corr.corrupt(unit, sampling_corruption, rng)))[None]

    gen = torch.Generator().manual_seed(derive_seed(seed, "noise"))
    y = enhance(x, model, schedule, gen, condition_fn)
    return from_model_range(from_tensor(y[0]))[:H, :W]


def load_model(path: Path):
    model, extra = load_checkpoint(path)
    if "schedule" not in extra:
        raise CliError(f"{path} carries no schedule; was it written by the trainer?")
    return model, NoiseSchedule.from_dict(extra["schedule"]), extra


def enhance_paths(ckpt: Path, inputs: Sequence[Path], out: Path, seed: int, corrupt_sampling: bool = False):
    model, schedule, extra = load_model(ckpt)
    spec = corr.resolve(extra.get("train", {}).get("corruption")) if corrupt_sampling else None
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for path in inputs:
        image_seed = derive_seed(seed, "sample", path.name)
        result = enhance_image(model, schedule, load_png(path), image_seed, spec)
        save_png(out / path.name, result)
        written.append(out / path.name)
    return written


def cmd_enhance(args) -> int:
    src = Path(args.input)
    if src.is_dir():
        inputs = []
        for p in sorted(src.iterdir()):
            if p.is_file() and p.suffix.lower() == ".png":
                inputs.append(p)
            elif p.is_file():
                print(f"stardiff: warning: skipping non-PNG file {p}", file=sys.stderr)
    elif src.is_file():
        inputs = [src]
    else:
        raise CliError(f"no such input: {src}")
    out = Path(args.out or default_out("enhanced"))
    written = enhance_paths(Path(args.checkpoint), inputs, out, args.seed, args.corrupt_sampling)
    for p in written:
        print(p)
    return 0


# ---------------------------------------------------------------- eval

def evaluate_manifest(manifest, pred_dir: Optional[Path]) -> MetricReport:
    """Score predictions in ``pred_dir`` (named like the manifest inputs)
    against references; without ``pred_dir`` the raw inputs are scored."""
    def pairs():
        for e in manifest:
            pred_path = pred_dir / Path(e.input).name if pred_dir else manifest.input_path(e)
            pred, ref = load_png(pred_path), load_png(manifest.reference_path(e))
            if pred.shape != ref.shape:
                raise CliError(f"pair {e.pair_id}: shape {pred.shape} does not match reference {ref.shape}")
            yield e.pair_id, pred, ref
    return evaluate_pairs(pairs())


def run_ablation(args, out: Path) -> list[tuple[str, MetricReport]]:
    rows = []
    for label, arm in ABLATION_ARMS:
        cfg = resolve_run_config(argparse.Namespace(**{**vars(args), "corruption": arm}))
        if cfg["holdout"] == 0:
            cfg["holdout"] = 8
        arm_dir = out / arm
        ckpt = run_training(cfg, Path(args.manifest), arm_dir / "train")
        manifest = load_manifest(args.manifest)
        _, held = split_holdout(manifest, cfg["holdout"])
        enhance_paths(ckpt, [held.input_path(e) for e in held], arm_dir / "enhanced",
                      derive_seed(int(cfg["seed"]), "ablation"))
        rep = evaluate_manifest(held, arm_dir / "enhanced")
        rep.write_csv(arm_dir / "metrics.csv")
        rows.append((label, rep))
    return rows


def ablation_table(rows) -> str:
    lines = [f"{'arm':<24} {'PSNR (dB)':>10} {'SSIM':>8}"]
    lines += [f"{label:<24} {rep.psnr_db:>10.4f} {rep.ssim:>8.4f}" for label, rep in rows]
    return "\n".join(lines)


def cmd_eval(args) -> int:
    out = Path(args.out or default_out("eval"))
    out.mkdir(parents=True, exist_ok=True)
    if args.ablation:
        rows = run_ablation(args, out)
        table = ablation_table(rows)
        with open(out / "ablation.csv", "w") as f:
            f.write("arm,psnr_db,ssim\n")
            for label, rep in rows:
                f.write(f"{label},{rep.psnr_db:.4f},{rep.ssim:.4f}\n")
    else:
        rep = evaluate_manifest(load_manifest(args.manifest), Path(args.pred_dir) if args.pred_dir else None)
        rep.write_csv(out / "metrics.csv")
        table = rep.table()
    (out / "table.txt").write_text(table + "\n")
    print(table)
    return 0


# ---------------------------------------------------------------- parser

def add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--preset", choices=sorted(PRESETS), default="desk")
    p.add_argument("--config", help="JSON file overriding preset fields")
    p.add_argument("--corruption", choices=CORRUPTION_CHOICES)
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", help="comma-separated epochs per phase")
    p.add_argument("--steps", type=int, help="number of diffusion steps T")
    p.add_argument("--lr-start", dest="lr_start", type=float)
    p.add_argument("--lr-end", dest="lr_end", type=float)
    p.add_argument("--max-steps", dest="max_steps", type=int, help="cap optimizer steps per phase")
    p.add_argument("--holdout", type=int, help="keep the last N manifest pairs out of training")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="stardiff", description="Conditional diffusion enhancement of star-field images.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="render synthetic input/reference pairs")
    p.add_argument("--pairs", type=int, required=True)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ranges", help="JSON file of {field: [low, high]} overrides")
    p.add_argument("--out")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="run the cascaded training")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out")
    p.add_argument("--resume", action="store_true")
    p.add_argument("--stop-after", dest="stop_after", type=int, help=argparse.SUPPRESS)
    add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("enhance", help="enhance a PNG or a directory of PNGs")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--corrupt-sampling", dest="corrupt_sampling", action="store_true",
                   help="re-corrupt the condition before every reverse step")
    p.set_defaults(func=cmd_enhance)

    p = sub.add_parser("eval", help="PSNR/SSIM against references, or the corruption ablation")
    p.add_argument("--manifest", required=True)
    p.add_argument("--pred-dir", dest="pred_dir")
    p.add_argument("--out")
    p.add_argument("--ablation", action="store_true")
    add_train_flags(p)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CliError, ValueError, OSError, KeyError, json.JSONDecodeError) as exc:
        msg = str(exc).replace("\n", " ")
        print(f"stardiff: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
