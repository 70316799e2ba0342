"""Time-conditioned denoising U-Net with self- and cross-attention at selected levels."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..errors import ConfigError

logger = logging.getLogger(__name__)


@dataclass
class DiffusionUNetConfig:
    channels: tuple[int, ...] = (32, 32, 64)
    attention_levels: tuple[bool, ...] = (False, False, True)
    attention_heads: int = 64
    residual_blocks: int = 2
    cross_attention_dim: int = 32
    input_patch: tuple[int, int, int] = (32, 32, 32)
    norm_groups: int = 32
    num_timesteps: int = 1000
    in_channels: int = 1

    @property
    def levels(self) -> int:
        return len(self.channels)

    @property
    def downsampling(self) -> int:
        return 2 ** (self.levels - 1)

    def validate(self) -> None:
        if not self.channels or len(self.attention_levels) != len(self.channels):
            raise ConfigError("channels and attention_levels must be non-empty and of equal length")
        if self.residual_blocks < 1:
            raise ConfigError("residual_blocks must be >= 1")
        for ch in self.channels:
            if ch % self.norm_groups:
                raise ConfigError(f"norm_groups={self.norm_groups} does not divide channel width {ch}")
        attended = {ch for ch, a in zip(self.channels, self.attention_levels) if a} | {self.channels[-1]}
        for ch in sorted(attended):
            if ch % self.attention_heads:
                raise ConfigError(f"{self.attention_heads} attention heads do not divide width {ch}")
            if ch // self.attention_heads == 1:
                logger.warning(
                    "attention on width %d with %d heads gives head_dim=1; override attention_heads if unintended",
                    ch,
                    self.attention_heads,
                )


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class TimeResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, temb_dim: int, groups: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, in_ch)
        self.conv1 = nn.Conv3d(in_ch, out_ch, 3, padding=1)
        self.time_proj = nn.Linear(temb_dim, out_ch)
        self.norm2 = nn.GroupNorm(groups, out_ch)
        self.conv2 = nn.Conv3d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv3d(in_ch, out_ch, 1) if in_ch != out_ch else None

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time_proj(F.silu(temb))[:, :, None, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + (x if self.skip is None else self.skip(x))


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int, context_dim: int | None = None):
        super().__init__()
        context_dim = context_dim or dim
        self.heads = heads
        self.to_q = nn.Linear(dim, dim, bias=False)
        self.to_k = nn.Linear(context_dim, dim, bias=False)
        self.to_v = nn.Linear(context_dim, dim, bias=False)
        self.to_out = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, context: torch.Tensor | None = None) -> torch.Tensor:
        context = x if context is None else context
        b, n, c = x.shape
        split = lambda t: t.reshape(b, t.shape[1], self.heads, c // self.heads).transpose(1, 2)  # noqa: E731
        q, k, v = split(self.to_q(x)), split(self.to_k(context)), split(self.to_v(context))
        out = F.scaled_dot_product_attention(q, k, v)
        return self.to_out(out.transpose(1, 2).reshape(b, n, c))


class SpatialTransformer(nn.Module):
    """Self-attention, cross-attention on the conditioning tokens, then a feed-forward layer."""

    def __init__(self, ch: int, heads: int, context_dim: int, groups: int):
        super().__init__()
        self.norm = nn.GroupNorm(groups, ch)
        self.proj_in = nn.Linear(ch, ch)
        self.norm1 = nn.LayerNorm(ch)
        self.self_attn = Attention(ch, heads)
        self.norm2 = nn.LayerNorm(ch)
        self.cross_attn = Attention(ch, heads, context_dim)
        self.norm3 = nn.LayerNorm(ch)
        self.ff = nn.Sequential(nn.Linear(ch, 4 * ch), nn.GELU(), nn.Linear(4 * ch, ch))
        self.proj_out = nn.Linear(ch, ch)

    def forward(self, x: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        b, c, d, h, w = x.shape
        tokens = self.proj_in(self.norm(x).flatten(2).transpose(1, 2))
        tokens = tokens + self.self_attn(self.norm1(tokens))
        tokens = tokens + self.cross_attn(self.norm2(tokens), context)
        tokens = tokens + self.ff(self.norm3(tokens))
        out = self.proj_out(tokens).transpose(1, 2).reshape(b, c, d, h, w)
        return x + out


class DownLevel(nn.Module):
    def __init__(self, in_ch, out_ch, cfg: DiffusionUNetConfig, temb_dim: int, attention: bool, downsample: bool):
        super().__init__()
        self.resnets = nn.ModuleList(
            [TimeResBlock(in_ch if i == 0 else out_ch, out_ch, temb_dim, cfg.norm_groups) for i in range(cfg.residual_blocks)]
        )
        self.attentions = nn.ModuleList(
            [SpatialTransformer(out_ch, cfg.attention_heads, cfg.cross_attention_dim, cfg.norm_groups) for _ in range(cfg.residual_blocks)]
            if attention
            else []
        )
        self.downsample = nn.Conv3d(out_ch, out_ch, 3, stride=2, padding=1) if downsample else None


class UpLevel(nn.Module):
    def __init__(self, in_ch, out_ch, skip_chs, cfg: DiffusionUNetConfig, temb_dim: int, attention: bool, upsample: bool):
        super().__init__()
        self.resnets = nn.ModuleList(
            [TimeResBlock((in_ch if i == 0 else out_ch) + s, out_ch, temb_dim, cfg.norm_groups) for i, s in enumerate(skip_chs)]
        )
        self.attentions = nn.ModuleList(
            [SpatialTransformer(out_ch, cfg.attention_heads, cfg.cross_attention_dim, cfg.norm_groups) for _ in skip_chs]
            if attention
            else []
        )
        self.upsample = nn.Conv3d(out_ch, out_ch, 3, padding=1) if upsample else None


class DiffusionUNet(nn.Module):
    """Predicts the noise field of a noisy patch at a given timestep."""

    stage_map = {
        "time_embed": "encoder",
        "null_context": "encoder",
        "conv_in": "encoder",
        "down": "encoder",
        "mid": "bottleneck",
        "up": "decoder",
        "out": "decoder",
    }

    def __init__(self, cfg: DiffusionUNetConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        ch = cfg.channels
        temb_dim = 4 * ch[0]
        self.time_embed = nn.Sequential(nn.Linear(ch[0], temb_dim), nn.SiLU(), nn.Linear(temb_dim, temb_dim))
        # learned stand-in for the conditioning sequence when none is given
        self.null_context = nn.Parameter(torch.randn(1, 1, cfg.cross_attention_dim) * 0.02)
        self.conv_in = nn.Conv3d(cfg.in_channels, ch[0], 3, padding=1)

        skip_chs = [ch[0]]
        self.down = nn.ModuleList()
        prev = ch[0]
        for i, out_ch in enumerate(ch):
            last = i == cfg.levels - 1
            self.down.append(DownLevel(prev, out_ch, cfg, temb_dim, cfg.attention_levels[i], downsample=not last))
            skip_chs += [out_ch] * cfg.residual_blocks + ([] if last else [out_ch])
            prev = out_ch

        self.mid = nn.ModuleDict(
            {
                "res1": TimeResBlock(ch[-1], ch[-1], temb_dim, cfg.norm_groups),
                "attn": SpatialTransformer(ch[-1], cfg.attention_heads, cfg.cross_attention_dim, cfg.norm_groups),
                "res2": TimeResBlock(ch[-1], ch[-1], temb_dim, cfg.norm_groups),
            }
        )

        self.up = nn.ModuleList()
        prev = ch[-1]
        for i in reversed(range(cfg.levels)):
            level_skips = [skip_chs.pop() for _ in range(cfg.residual_blocks + 1)]
            self.up.append(UpLevel(prev, ch[i], level_skips, cfg, temb_dim, cfg.attention_levels[i], upsample=i > 0))
            prev = ch[i]

        self.out = nn.Sequential(nn.GroupNorm(cfg.norm_groups, ch[0]), nn.SiLU(), nn.Conv3d(ch[0], cfg.in_channels, 3, padding=1))
        self.feature_channels = ch[0]
        self.bottleneck_channels = ch[-1]

    def _context(self, context: torch.Tensor | None, batch: int) -> torch.Tensor:
        if context is None:
            return self.null_context.expand(batch, -1, -1)
        if context.dim() == 2:
            context = context[:, None]
        if context.shape[-1] != self.cfg.cross_attention_dim:
            raise ConfigError(f"conditioning width {context.shape[-1]} != cross_attention_dim {self.cfg.cross_attention_dim}")
        return context

    def forward_features(
        self, x: torch.Tensor, t: torch.Tensor | int | None = None, context: torch.Tensor | None = None
    ) -> dict[str, torch.Tensor]:
        b = x.shape[0]
        if t is None:
            t = 0
        t = torch.as_tensor(t, dtype=torch.long)
        if t.dim() == 0:
            t = t.expand(b)
        if bool((t < 0).any()) or bool((t >= self.cfg.num_timesteps).any()):
            raise IndexError(f"timestep outside schedule [0, {self.cfg.num_timesteps})")
        dims = tuple(x.shape[-3:])
        f = self.cfg.downsampling
        pads = [(-s) % f for s in dims]
        if any(pads):
            x = F.pad(x, (0, pads[2], 0, pads[1], 0, pads[0]))

        temb = self.time_embed(timestep_embedding(t, self.cfg.channels[0]))
        ctx = self._context(context, b)

        h = self.conv_in(x)
        skips = [h]
        for level in self.down:
            for i, res in enumerate(level.resnets):
                h = res(h, temb)
                if len(level.attentions):
                    h = level.attentions[i](h, ctx)
                skips.append(h)
            if level.downsample is not None:
                h = level.downsample(h)
                skips.append(h)

        h = self.mid["res1"](h, temb)
        h = self.mid["attn"](h, ctx)
        h = self.mid["res2"](h, temb)
        bottleneck = h

        for level in self.up:
            for i, res in enumerate(level.resnets):
                h = res(torch.cat([h, skips.pop()], dim=1), temb)
                if len(level.attentions):
                    h = level.attentions[i](h, ctx)
            if level.upsample is not None:
                h = level.upsample(F.interpolate(h, scale_factor=2, mode="nearest"))

        out = self.out(h)
        crop = (..., slice(0, dims[0]), slice(0, dims[1]), slice(0, dims[2]))
        return {"recon": out[crop], "features": h[crop], "bottleneck": bottleneck}

    def forward(self, x: torch.Tensor, t: torch.Tensor | int, context: torch.Tensor | None = None) -> torch.Tensor:
        return self.forward_features(x, t, context)["recon"]
