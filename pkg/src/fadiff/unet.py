"""Class-conditioned denoising U-Net with a bottleneck feature tap."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import NamedTuple, Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F


class UNetError(ValueError):
    pass


@dataclass
class UNetConfig:
    image_size: int = 32
    in_channels: int = 1
    base_channels: int = 32
    channel_multipliers: Tuple[int, ...] = (1, 2, 4)
    num_classes: int = 8
    time_embed_dim: int = 128
    num_res_blocks: int = 2
    norm_groups: int = 8

    def __post_init__(self):
        self.channel_multipliers = tuple(int(m) for m in self.channel_multipliers)
        if self.num_classes < 1:
            raise UNetError("num_classes must be >= 1")
        if not self.channel_multipliers:
            raise UNetError("channel_multipliers must be non-empty")
        if self.image_size % (2 ** (len(self.channel_multipliers) - 1)):
            raise UNetError(
                f"image_size {self.image_size} not divisible by "
                f"2^{len(self.channel_multipliers) - 1}")
        if self.time_embed_dim % 2:
            raise UNetError("time_embed_dim must be even")
        for ch in self.level_channels:
            if ch % self.norm_groups:
                raise UNetError(f"{ch} channels not divisible by {self.norm_groups} groups")

    @property
    def level_channels(self) -> Tuple[int, ...]:
        return tuple(self.base_channels * m for m in self.channel_multipliers)

    @property
    def feature_dim(self) -> int:
        """E_d, the channel count of the bottleneck tap."""
        return self.level_channels[-1]

    @property
    def bottleneck_size(self) -> int:
        return self.image_size // 2 ** (len(self.channel_multipliers) - 1)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_multipliers"] = list(self.channel_multipliers)
        return d


class UNetOutput(NamedTuple):
    eps_pred: torch.Tensor
    bottleneck: torch.Tensor


def time_embedding(t, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Sinusoidal embedding ``[sin(t*f_0..f_{k-1}), cos(t*f_0..f_{k-1})]``.

    Frequencies are f_i = max_period ** (-i / k) with k = dim // 2. Accepts a
    scalar or a (B,) tensor and returns (dim,) or (B, dim) in float32.
    """
    if dim % 2:
        raise UNetError(f"embedding dim must be even, got {dim}")
    t = torch.as_tensor(t, dtype=torch.float64)
    if (t < 0).any():
        raise UNetError("timesteps must be non-negative")
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t[..., None] * freqs
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1).float()


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, emb_dim: int, groups: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.emb_proj = nn.Linear(emb_dim, out_ch)
        self.norm2 = nn.GroupNorm(groups, out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb_proj(F.silu(emb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class UNet(nn.Module):
    """Three-level conv U-Net; class conditioning is a learned embedding added
    to the time embedding and fed to every residual block as a channel bias.

    ``forward`` returns the noise prediction together with the activation
    leaving the last down level (the alignment tap).
    """

    def __init__(self, config: Optional[UNetConfig] = None):
        super().__init__()
        self.config = config = config or UNetConfig()
        chans = config.level_channels
        emb = config.time_embed_dim
        g = config.norm_groups

        self.time_mlp = nn.Sequential(nn.Linear(emb, emb), nn.SiLU(), nn.Linear(emb, emb))
        self.class_embed = nn.Embedding(config.num_classes, emb)
        self.conv_in = nn.Conv2d(config.in_channels, chans[0], 3, padding=1)

        self.down = nn.ModuleList()
        self.downsample = nn.ModuleList()
        prev = chans[0]
        for i, ch in enumerate(chans):
            blocks = nn.ModuleList()
            for _ in range(config.num_res_blocks):
                blocks.append(ResBlock(prev, ch, emb, g))
                prev = ch
            self.down.append(blocks)
            if i < len(chans) - 1:
                self.downsample.append(nn.Conv2d(ch, ch, 3, stride=2, padding=1))

        self.mid = ResBlock(prev, prev, emb, g)

        self.up = nn.ModuleList()
        self.upsample = nn.ModuleList()
        for i, ch in reversed(list(enumerate(chans))):
            blocks = nn.ModuleList()
            blocks.append(ResBlock(prev + ch, ch, emb, g))
            for _ in range(config.num_res_blocks - 1):
                blocks.append(ResBlock(ch, ch, emb, g))
            prev = ch
            self.up.append(blocks)
            if i > 0:
                self.upsample.append(nn.Conv2d(ch, chans[i - 1], 3, padding=1))
                prev = chans[i - 1]

        self.norm_out = nn.GroupNorm(g, prev)
        self.conv_out = nn.Conv2d(prev, config.in_channels, 3, padding=1)
        self.reset_parameters()

    @torch.no_grad()
    def reset_parameters(self, generator: Optional[torch.Generator] = None) -> None:
        """normal(0, 0.02) weights, zero biases, zero output conv; norms get unit scale."""
        for name, p in self.named_parameters():
            if name.startswith("conv_out."):
                p.zero_()
            elif ".norm" in name or name.startswith("norm_out."):
                p.fill_(1.0 if name.endswith("weight") else 0.0)
            elif name.endswith("bias"):
                p.zero_()
            else:
                p.normal_(0.0, 0.02, generator=generator)

    def forward(self, x: torch.Tensor, t: torch.Tensor, class_id: torch.Tensor) -> UNetOutput:
        cfg = self.config
        if x.ndim != 4 or x.shape[1] != cfg.in_channels:
            raise UNetError(f"expected (B, {cfg.in_channels}, H, W), got {tuple(x.shape)}")
        if x.shape[-1] % (2 ** (len(cfg.channel_multipliers) - 1)) or x.shape[-1] != x.shape[-2]:
            raise UNetError(f"bad spatial size {tuple(x.shape[-2:])}")
        B = x.shape[0]
        t = torch.as_tensor(t).reshape(-1)
        class_id = torch.as_tensor(class_id, dtype=torch.int64).reshape(-1)
        if t.shape[0] != B or class_id.shape[0] != B:
            raise UNetError(
                f"batch mismatch: x {B}, t {t.shape[0]}, class_id {class_id.shape[0]}")
        if class_id.numel() and (int(class_id.min()) < 0 or int(class_id.max()) >= cfg.num_classes):
            raise UNetError(f"class id out of range [0, {cfg.num_classes}): {class_id.tolist()}")

        temb = time_embedding(t, cfg.time_embed_dim).to(x.dtype)
        emb = self.time_mlp(temb) + self.class_embed(class_id)

        h = self.conv_in(x)
        skips = []
        for i, blocks in enumerate(self.down):
            for block in blocks:
                h = block(h, emb)
            skips.append(h)
            if i < len(self.downsample):
                h = self.downsample[i](h)
        bottleneck = h

        h = self.mid(h, emb)
        for i, blocks in enumerate(self.up):
            h = torch.cat([h, skips.pop()], dim=1)
            for block in blocks:
                h = block(h, emb)
            if i < len(self.upsample):
                h = F.interpolate(h, scale_factor=2, mode="nearest")
                h = self.upsample[i](h)
        eps = self.conv_out(F.silu(self.norm_out(h)))
        return UNetOutput(eps, bottleneck)


def _resblock_params(cin: int, cout: int, emb: int) -> int:
    n = 2 * cin                      # norm1
    n += 9 * cin * cout + cout       # conv1
    n += emb * cout + cout           # emb_proj
    n += 2 * cout                    # norm2
    n += 9 * cout * cout + cout      # conv2
    if cin != cout:
        n += cin * cout + cout       # 1x1 skip
    return n


def count_parameters(config: UNetConfig) -> int:
    """Closed-form parameter count, mirroring the constructor layer by layer."""
    chans = config.level_channels
    emb = config.time_embed_dim
    c_in = config.in_channels
    n = 2 * (emb * emb + emb)                    # time MLP
    n += config.num_classes * emb                # class table
    n += 9 * c_in * chans[0] + chans[0]          # conv_in
    prev = chans[0]
    for i, ch in enumerate(chans):
        for _ in range(config.num_res_blocks):
            n += _resblock_params(prev, ch, emb)
            prev = ch
        if i < len(chans) - 1:
            n += 9 * ch * ch + ch                # strided conv
    n += _resblock_params(prev, prev, emb)       # mid
    for i in reversed(range(len(chans))):
        ch = chans[i]
        n += _resblock_params(prev + ch, ch, emb)
        n += (config.num_res_blocks - 1) * _resblock_params(ch, ch, emb)
        prev = ch
        if i > 0:
            n += 9 * ch * chans[i - 1] + chans[i - 1]
            prev = chans[i - 1]
    n += 2 * prev                                # norm_out
    n += 9 * prev * c_in + c_in                  # conv_out
    return n
