"""Compact conditional U-Net that predicts the injected noise.

The network sees the noisy state and the condition image concatenated along
channels (6 in, 3 out). Three resolution levels, each with two residual blocks,
optional linear attention and a 2x resampling; a residual/attention/residual
bottleneck; a mirrored decoder with concatenated skips.
"""
from __future__ import annotations

import io
import json
import math
import zipfile
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

CHECKPOINT_FORMAT = "stardiff-ckpt/1"
_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


@dataclass(frozen=True)
class DenoiserConfig:
    base_channels: int = 16
    channel_multipliers: tuple[int, int, int] = (1, 2, 4)
    time_embed_dim: int = 64
    attention_levels: tuple = (3, "bottleneck")
    groups_per_norm: int = 4

    def __post_init__(self):
        if len(self.channel_multipliers) != 3:
            raise ValueError("exactly three channel multipliers are required")
        if self.base_channels < 1 or any(m < 1 for m in self.channel_multipliers):
            raise ValueError("channel counts must be positive")
        if self.time_embed_dim < 2 or self.time_embed_dim % 2:
            raise ValueError("time_embed_dim must be an even integer >= 2")
        if self.groups_per_norm < 1 or self.base_channels % self.groups_per_norm:
            raise ValueError("base_channels must be divisible by groups_per_norm")
        for lv in self.attention_levels:
            if lv not in (1, 2, 3, "bottleneck"):
                raise ValueError(f"invalid attention level {lv!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_multipliers"] = list(self.channel_multipliers)
        d["attention_levels"] = list(self.attention_levels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserConfig":
        return cls(
            base_channels=int(d["base_channels"]),
            channel_multipliers=tuple(int(m) for m in d["channel_multipliers"]),
            time_embed_dim=int(d["time_embed_dim"]),
            attention_levels=tuple(d["attention_levels"]),
            groups_per_norm=int(d["groups_per_norm"]),
        )


DESK_CONFIG = DenoiserConfig()
MINIMAL_CONFIG = DenoiserConfig(base_channels=4, channel_multipliers=(1, 1, 1), time_embed_dim=8,
                                attention_levels=(3, "bottleneck"), groups_per_norm=2)


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class ResBlock(nn.Module):
    def __init__(self, ch_in: int, ch_out: int, temb_dim: int, groups: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, ch_in)
        self.conv1 = nn.Conv2d(ch_in, ch_out, 3, padding=1)
        self.temb = nn.Linear(temb_dim, ch_out)
        self.norm2 = nn.GroupNorm(groups, ch_out)
        self.conv2 = nn.Conv2d(ch_out, ch_out, 3, padding=1)
        self.skip = nn.Conv2d(ch_in, ch_out, 1) if ch_in != ch_out else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class LinearAttention(nn.Module):
    """Efficient attention: softmax over features for queries and over pixels
    for keys, then values are aggregated through the k^T v context, so cost is
    linear in the number of pixels."""

    def __init__(self, ch: int, groups: int, heads: int = 1):
        super().__init__()
        self.heads = heads
        self.norm = nn.GroupNorm(groups, ch)
        self.qkv = nn.Conv2d(ch, 3 * ch, 1, bias=False)
        self.out = nn.Conv2d(ch, ch, 1)

    def forward(self, x):
        n, c, h, w = x.shape
        q, k, v = self.qkv(self.norm(x)).reshape(n, 3, self.heads, c // self.heads, h * w).unbind(1)
        q = q.softmax(dim=-2)
        k = k.softmax(dim=-1)
        context = torch.einsum("bhdn,bhen->bhde", k, v)
        out = torch.einsum("bhde,bhdn->bhen", context, q).reshape(n, c, h, w)
        return x + self.out(out)


class Downsample(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.conv = nn.Conv2d(ch, ch, 3, stride=2, padding=1)

    def forward(self, x):
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.conv = nn.Conv2d(ch, ch, 3, padding=1)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


class Denoiser(nn.Module):
    def __init__(self, config: DenoiserConfig):
        super().__init__()
        self.config = config
        g = config.groups_per_norm
        ted = config.time_embed_dim
        chans = [config.base_channels * m for m in config.channel_multipliers]
        self.time_mlp = nn.Sequential(nn.Linear(ted, ted), nn.SiLU(), nn.Linear(ted, ted))
        self.in_conv = nn.Conv2d(6, config.base_channels, 3, padding=1)

        def attn(level, ch):
            return LinearAttention(ch, g) if level in config.attention_levels else nn.Identity()

        self.down = nn.ModuleList()
        ch = config.base_channels
        for i, c in enumerate(chans):
            self.down.append(nn.ModuleList([
                ResBlock(ch, c, ted, g), ResBlock(c, c, ted, g), attn(i + 1, c), Downsample(c)]))
            ch = c
        self.mid1 = ResBlock(ch, ch, ted, g)
        self.mid_attn = attn("bottleneck", ch)
        self.mid2 = ResBlock(ch, ch, ted, g)
        self.up = nn.ModuleList()
        for i in reversed(range(len(chans))):
            c = chans[i]
            self.up.append(nn.ModuleList([
                Upsample(ch), ResBlock(ch + c, c, ted, g), ResBlock(c, c, ted, g), attn(i + 1, c)]))
            ch = c
        self.out_norm = nn.GroupNorm(g, ch)
        self.out_conv = nn.Conv2d(ch, 3, 3, padding=1)

    def forward(self, y_t: torch.Tensor, x_cond: torch.Tensor, t) -> torch.Tensor:
        squeeze = y_t.ndim == 3
        if squeeze:
            y_t, x_cond = y_t[None], x_cond[None]
        if y_t.shape != x_cond.shape or y_t.shape[1] != 3:
            raise ValueError("state and condition must both be (N, 3, H, W) with equal shapes")
        H, W = y_t.shape[-2:]
        if H % 8 or W % 8:
            raise ValueError(f"spatial size {H}x{W} must be divisible by 8")
        n = y_t.shape[0]
        t = torch.as_tensor(t)
        if t.ndim == 0:
            t = t.expand(n)
        temb = self.time_mlp(timestep_embedding(t, self.config.time_embed_dim).to(y_t.dtype))

        h = self.in_conv(torch.cat([y_t, x_cond], dim=1))
        skips = []
        for res1, res2, att, down in self.down:
            h = att(res2(res1(h, temb), temb))
            skips.append(h)
            h = down(h)
        h = self.mid2(self.mid_attn(self.mid1(h, temb)), temb)
        for up, res1, res2, att in self.up:
            h = torch.cat([up(h), skips.pop()], dim=1)
            h = att(res2(res1(h, temb), temb))
        out = self.out_conv(F.silu(self.out_norm(h)))
        return out[0] if squeeze else out

    @property
    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


def init_denoiser(config: DenoiserConfig, seed: int = 0, dtype=torch.float32) -> Denoiser:
    """Build a denoiser with fan-in scaled weights and a zeroed output head."""
    gen = torch.Generator().manual_seed(int(seed))
    model = Denoiser(config).to(dtype)
    with torch.no_grad():
        for module in model.modules():
            if isinstance(module, nn.GroupNorm):
                module.weight.fill_(1.0)
                module.bias.zero_()
            elif isinstance(module, (nn.Conv2d, nn.Linear)):
                w = module.weight
                bound = 1.0 / math.sqrt(w[0].numel())
                w.copy_((torch.rand(w.shape, generator=gen, dtype=torch.float64) * 2 - 1) * bound)
                if module.bias is not None:
                    module.bias.zero_()
        model.out_conv.weight.zero_()
        model.out_conv.bias.zero_()
    return model


def forward(state: Denoiser, y_t: torch.Tensor, x_cond: torch.Tensor, t) -> torch.Tensor:
    return state(y_t, x_cond, t)


def backward(state: Denoiser, loss: torch.Tensor) -> dict[str, torch.Tensor]:
    """Reverse-mode gradients of ``loss`` for every named parameter.

    Parameters with ``requires_grad`` switched off (frozen) get exact zeros.
    """
    if loss.grad_fn is None:
        raise RuntimeError("loss carries no graph; run a forward pass with gradients enabled first")
    named = list(state.named_parameters())
    live = [p for _, p in named if p.requires_grad]
    grads = iter(torch.autograd.grad(loss, live, allow_unused=True))
    out = {}
    for name, p in named:
        if p.requires_grad:
            g = next(grads)
            out[name] = torch.zeros_like(p) if g is None else g
        else:
            out[name] = torch.zeros_like(p)
    return out


# ---------------------------------------------------------------- checkpoints

def _npy_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.save(buf, arr, allow_pickle=False)
    return buf.getvalue()


def write_npz(path: Union[str, Path], arrays: dict[str, np.ndarray]) -> None:
    """Write an .npz archive with fixed timestamps so identical content gives identical bytes."""
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            info = zipfile.ZipInfo(name + ".npy", date_time=_ZIP_DATE)
            info.external_attr = 0o644 << 16
            zf.writestr(info, _npy_bytes(arrays[name]))


def save_checkpoint(path: Union[str, Path], state: Denoiser, extra: Optional[dict] = None) -> None:
    params = {name: p.detach().cpu().numpy() for name, p in state.state_dict().items()}
    meta = {
        "format": CHECKPOINT_FORMAT,
        "byte_order": "little",
        "config": state.config.to_dict(),
        "parameters": {name: {"shape": list(a.shape), "dtype": a.dtype.str.lstrip("<>=|")}
                       for name, a in params.items()},
        "extra": extra or {},
    }
    arrays = {"param/" + name: np.ascontiguousarray(a).astype(a.dtype.newbyteorder("<"))
              for name, a in params.items()}
    arrays["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    write_npz(path, arrays)


def load_checkpoint(path: Union[str, Path]) -> tuple[Denoiser, dict]:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(bytes(z["__meta__"]).decode())
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"unsupported checkpoint format {meta.get('format')!r}")
        config = DenoiserConfig.from_dict(meta["config"])
        state_dict = {}
        for name, info in meta["parameters"].items():
            arr = z["param/" + name]
            if list(arr.shape) != info["shape"]:
                raise ValueError(f"shape mismatch for {name}")
            state_dict[name] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("=")))
    dtype = next(iter(state_dict.values())).dtype
    model = Denoiser(config).to(dtype)
    model.load_state_dict(state_dict)
    model.eval()
    return model, meta.get("extra", {})

