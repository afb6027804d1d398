"""Image files, range conversion, cropping, resizing and dataset manifests.

Images live in memory as float64 arrays of shape (H, W, 3). "Unit" range is
[0, 1] (file values / 255); "model" range is [-1, 1].
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterator, Optional, Union

import numpy as np
import torch
from PIL import Image

PathLike = Union[str, Path]


def load_png(path: PathLike) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such image: {path}")
    with Image.open(path) as im:
        if im.mode != "RGB":
            raise ValueError(f"{path}: expected 8-bit RGB, got mode {im.mode}")
        arr = np.asarray(im, dtype=np.uint8)
    return arr.astype(np.float64) / 255.0


def quantize(x: np.ndarray) -> np.ndarray:
    return np.round(np.clip(x, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_png(path: PathLike, x: np.ndarray) -> None:
    x = np.asarray(x)
    if x.ndim != 3 or x.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got {x.shape}")
    Image.fromarray(quantize(x), mode="RGB").save(path, format="PNG")


def to_model_range(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.size and (x.min() < 0.0 or x.max() > 1.0):
        raise ValueError("to_model_range expects a unit-range image")
    return 2.0 * x - 1.0


def from_model_range(y: np.ndarray) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    return np.clip((y + 1.0) / 2.0, 0.0, 1.0)


def to_tensor(x: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    """(H, W, C) or (N, H, W, C) array -> channel-first tensor."""
    x = np.asarray(x)
    perm = (2, 0, 1) if x.ndim == 3 else (0, 3, 1, 2)
    return torch.from_numpy(np.ascontiguousarray(x.transpose(perm))).to(dtype)


def from_tensor(t: torch.Tensor) -> np.ndarray:
    a = t.detach().cpu().to(torch.float64).numpy()
    perm = (1, 2, 0) if a.ndim == 3 else (0, 2, 3, 1)
    return a.transpose(perm)


def crop_offsets(shape: tuple[int, ...], size: int, rng: np.random.Generator) -> tuple[int, int]:
    H, W = shape[:2]
    if size > min(H, W):
        raise ValueError(f"crop size {size} exceeds image size {H}x{W}")
    return int(rng.integers(0, H - size + 1)), int(rng.integers(0, W - size + 1))


def random_crop_pair(inp: np.ndarray, ref: np.ndarray, size: int,
                     rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    if inp.shape != ref.shape:
        raise ValueError(f"pair shape mismatch {inp.shape} vs {ref.shape}")
    r, c = crop_offsets(inp.shape, size, rng)
    return inp[r:r + size, c:c + size], ref[r:r + size, c:c + size]


def resize(x: np.ndarray, new_h: int, new_w: int) -> np.ndarray:
    """Bilinear resampling with half-pixel centres (no antialiasing)."""
    if new_h < 1 or new_w < 1:
        raise ValueError("target size must be positive")
    x = np.asarray(x)
    H, W = x.shape[:2]
    if (H, W) == (new_h, new_w):
        return x.copy()

    def axis(n_in, n_out):
        pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        pos = np.clip(pos, 0, n_in - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    r0, r1, fr = axis(H, new_h)
    c0, c1, fc = axis(W, new_w)
    fr = fr.reshape(-1, 1, *([1] * (x.ndim - 2)))
    fc = fc.reshape(1, -1, *([1] * (x.ndim - 2)))
    top = x[r0][:, c0] * (1 - fc) + x[r0][:, c1] * fc
    bot = x[r1][:, c0] * (1 - fc) + x[r1][:, c1] * fc
    return top * (1 - fr) + bot * fr


def pad_to_multiple(x: np.ndarray, m: int = 8) -> tuple[np.ndarray, tuple[int, int]]:
    """Reflect-pad bottom/right so both sides are multiples of ``m``."""
    H, W = x.shape[:2]
    ph, pw = (-H) % m, (-W) % m
    if ph == 0 and pw == 0:
        return x, (H, W)
    mode = "reflect" if ph < H and pw < W else "symmetric"
    return np.pad(x, ((0, ph), (0, pw), (0, 0)), mode=mode), (H, W)


# ---------------------------------------------------------------- manifests

@dataclass
class ManifestEntry:
    pair_id: str
    input: str
    reference: str
    spec: Optional[dict] = None
    seed: Optional[int] = None

    def to_json(self) -> str:
        rec: dict[str, Any] = {"id": self.pair_id, "input": self.input, "reference": self.reference}
        if self.spec is not None:
            rec["spec"] = self.spec
        if self.seed is not None:
            rec["seed"] = self.seed
        return json.dumps(rec, sort_keys=True)


@dataclass
class DatasetManifest:
    root: Path
    entries: list[ManifestEntry] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[ManifestEntry]:
        return iter(self.entries)

    def input_path(self, e: ManifestEntry) -> Path:
        return self.root / e.input

    def reference_path(self, e: ManifestEntry) -> Path:
        return self.root / e.reference

    def load_pairs(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return [(load_png(self.input_path(e)), load_png(self.reference_path(e))) for e in self.entries]

    def subset(self, ids) -> "DatasetManifest":
        keep = set(ids)
        return DatasetManifest(self.root, [e for e in self.entries if e.pair_id in keep])

    def digest(self) -> str:
        h = hashlib.sha256()
        for e in self.entries:
            h.update(e.to_json().encode())
            h.update(b"\n")
        return h.hexdigest()


def write_manifest(path: PathLike, entries: list[ManifestEntry]) -> None:
    with open(path, "w") as f:
        for e in entries:
            f.write(e.to_json() + "\n")


def load_manifest(path: PathLike, check_files: bool = True) -> DatasetManifest:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such manifest: {path}")
    entries, seen = [], set()
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        rec = json.loads(line)
        e = ManifestEntry(str(rec["id"]), rec["input"], rec["reference"], rec.get("spec"), rec.get("seed"))
        if e.pair_id in seen:
            raise ValueError(f"{path}:{lineno}: duplicate pair id {e.pair_id!r}")
        seen.add(e.pair_id)
        entries.append(e)
    man = DatasetManifest(path.parent, entries)
    if check_files:
        for e in entries:
            for p in (man.input_path(e), man.reference_path(e)):
                if not p.is_file():
                    raise FileNotFoundError(f"{path}: pair {e.pair_id!r} references missing file {p}")
    return man
