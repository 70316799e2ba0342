"""Hierarchical shifted-window attention encoder with a convolutional U-shaped decoder.

A compact 3D Swin-UNETR: a Swin transformer encoder produces one hidden state
per resolution, residual conv blocks turn these into skip features, and
transposed-conv up blocks decode back to input resolution.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..errors import ConfigError


@dataclass
class EncoderDecoderConfig:
    feature_size: int = 24
    input_patch: tuple[int, int, int] = (64, 64, 63)
    depths: tuple[int, ...] = (2, 2, 2, 2)
    num_heads: tuple[int, ...] = (3, 6, 12, 24)
    window_size: int = 7
    in_channels: int = 1
    out_channels: int = 1
    mlp_ratio: float = 4.0
    # pad inputs up to a multiple of the downsampling factor and crop outputs back
    pad_input: bool = True
    # SSIM is invariant to negating both images, so an unbounded output can
    # settle on an inverted reconstruction; a sigmoid keeps it in [0, 1]
    out_activation: str = "sigmoid"

    @property
    def downsampling(self) -> int:
        return 2 ** (len(self.depths) + 1)

    def validate(self) -> None:
        if self.feature_size < 2:
            raise ConfigError(f"feature_size must be >= 2, got {self.feature_size}")
        if len(self.depths) != len(self.num_heads) or not self.depths:
            raise ConfigError("depths and num_heads must be non-empty and of equal length")
        for i, heads in enumerate(self.num_heads):
            dim = self.feature_size * 2**i
            if dim % heads:
                raise ConfigError(f"stage {i}: {heads} heads do not divide width {dim}")
        if self.out_activation not in ("sigmoid", "none"):
            raise ConfigError(f"out_activation must be 'sigmoid' or 'none', got {self.out_activation!r}")
        if len(self.input_patch) != 3 or min(self.input_patch) < 1:
            raise ConfigError(f"invalid input_patch {self.input_patch}")
        if not self.pad_input and any(s % self.downsampling for s in self.input_patch):
            raise ConfigError(
                f"input_patch {self.input_patch} not divisible by downsampling factor {self.downsampling}"
            )


def _window_partition(x: torch.Tensor, ws: tuple[int, int, int]) -> torch.Tensor:
    b, d, h, w, c = x.shape
    x = x.view(b, d // ws[0], ws[0], h // ws[1], ws[1], w // ws[2], ws[2], c)
    return x.permute(0, 1, 3, 5, 2, 4, 6, 7).reshape(-1, ws[0] * ws[1] * ws[2], c)


def _window_reverse(windows: torch.Tensor, ws: tuple[int, int, int], b: int, d: int, h: int, w: int) -> torch.Tensor:
    x = windows.view(b, d // ws[0], h // ws[1], w // ws[2], ws[0], ws[1], ws[2], -1)
    return x.permute(0, 1, 4, 2, 5, 3, 6, 7).reshape(b, d, h, w, -1)


@lru_cache(maxsize=64)
def _relative_index(ws: tuple[int, int, int], table_ws: tuple[int, int, int]) -> torch.Tensor:
    coords = torch.stack(torch.meshgrid(*[torch.arange(s) for s in ws], indexing="ij")).flatten(1)
    rel = (coords[:, :, None] - coords[:, None, :]).permute(1, 2, 0)
    rel = rel + torch.tensor([t - 1 for t in table_ws])
    return rel[..., 0] * (2 * table_ws[1] - 1) * (2 * table_ws[2] - 1) + rel[..., 1] * (2 * table_ws[2] - 1) + rel[..., 2]


@lru_cache(maxsize=64)
def _shift_mask(dims: tuple[int, int, int], ws: tuple[int, int, int], shift: tuple[int, int, int]) -> torch.Tensor:
    img = torch.zeros(1, *dims, 1)
    cnt = 0
    slices = [
        (slice(0, -w), slice(-w, -s), slice(-s, None)) if s else (slice(None),)
        for w, s in zip(ws, shift)
    ]
    for sd in slices[0]:
        for sh in slices[1]:
            for sw in slices[2]:
                img[:, sd, sh, sw, :] = cnt
                cnt += 1
    windows = _window_partition(img, ws).squeeze(-1)
    mask = windows[:, None, :] - windows[:, :, None]
    return mask.masked_fill(mask != 0, -100.0).masked_fill(mask == 0, 0.0)


class WindowAttention(nn.Module):
    def __init__(self, dim: int, num_heads: int, window: tuple[int, int, int]):
        super().__init__()
        self.num_heads = num_heads
        self.window = window
        self.scale = (dim // num_heads) ** -0.5
        n_rel = (2 * window[0] - 1) * (2 * window[1] - 1) * (2 * window[2] - 1)
        self.relative_position_bias_table = nn.Parameter(torch.zeros(n_rel, num_heads))
        nn.init.trunc_normal_(self.relative_position_bias_table, std=0.02)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, ws: tuple[int, int, int], mask: torch.Tensor | None) -> torch.Tensor:
        bw, n, c = x.shape
        qkv = self.qkv(x).reshape(bw, n, 3, self.num_heads, c // self.num_heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0] * self.scale, qkv[1], qkv[2]
        attn = q @ k.transpose(-2, -1)
        index = _relative_index(ws, self.window)
        bias = self.relative_position_bias_table[index.reshape(-1)].reshape(n, n, -1).permute(2, 0, 1)
        attn = attn + bias[None]
        if mask is not None:
            nw = mask.shape[0]
            attn = attn.view(bw // nw, nw, self.num_heads, n, n) + mask[None, :, None].to(attn.dtype)
            attn = attn.view(-1, self.num_heads, n, n)
        attn = attn.softmax(dim=-1)
        return self.proj((attn @ v).transpose(1, 2).reshape(bw, n, c))


class SwinBlock(nn.Module):
    def __init__(self, dim: int, num_heads: int, window: int, shifted: bool, mlp_ratio: float):
        super().__init__()
        self.window = window
        self.shifted = shifted
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention(dim, num_heads, (window,) * 3)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, d, h, w, c = x.shape
        dims = (d, h, w)
        # windows never exceed the grid; no shift on axes the window already spans
        ws = tuple(min(self.window, s) for s in dims)
        shift = tuple(wsz // 2 if self.shifted and s > self.window else 0 for wsz, s in zip(ws, dims))

        shortcut = x
        x = self.norm1(x)
        pads = [(-s) % wsz for s, wsz in zip(dims, ws)]
        x = F.pad(x, (0, 0, 0, pads[2], 0, pads[1], 0, pads[0]))
        pd, ph, pw = d + pads[0], h + pads[1], w + pads[2]
        mask = None
        if any(shift):
            x = torch.roll(x, shifts=tuple(-s for s in shift), dims=(1, 2, 3))
            mask = _shift_mask((pd, ph, pw), ws, shift)
        windows = self.attn(_window_partition(x, ws), ws, mask)
        x = _window_reverse(windows, ws, b, pd, ph, pw)
        if any(shift):
            x = torch.roll(x, shifts=shift, dims=(1, 2, 3))
        x = shortcut + x[:, :d, :h, :w]
        return x + self.mlp(self.norm2(x))


class PatchMerging(nn.Module):
    """Concatenate each 2x2x2 neighbourhood and project ``8C -> 2C``."""

    def __init__(self, dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(8 * dim)
        self.reduction = nn.Linear(8 * dim, 2 * dim, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        d, h, w = x.shape[1:4]
        x = F.pad(x, (0, 0, 0, w % 2, 0, h % 2, 0, d % 2))
        parts = [x[:, i::2, j::2, k::2] for i in (0, 1) for j in (0, 1) for k in (0, 1)]
        return self.reduction(self.norm(torch.cat(parts, dim=-1)))


class SwinStage(nn.Module):
    def __init__(self, dim: int, depth: int, num_heads: int, window: int, mlp_ratio: float):
        super().__init__()
        self.blocks = nn.ModuleList(
            [SwinBlock(dim, num_heads, window, shifted=bool(i % 2), mlp_ratio=mlp_ratio) for i in range(depth)]
        )
        self.downsample = PatchMerging(dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for blk in self.blocks:
            x = blk(x)
        return self.downsample(x)


def _channels_last_norm(x: torch.Tensor) -> torch.Tensor:
    """Parameter-free layer norm over channels of a channels-first tensor."""
    x = x.movedim(1, -1)
    return F.layer_norm(x, x.shape[-1:]).movedim(-1, 1)


class SwinEncoder(nn.Module):
    def __init__(self, cfg: EncoderDecoderConfig):
        super().__init__()
        fs = cfg.feature_size
        self.patch_embed = nn.Conv3d(cfg.in_channels, fs, kernel_size=2, stride=2)
        self.stages = nn.ModuleList(
            [
                SwinStage(fs * 2**i, depth, heads, cfg.window_size, cfg.mlp_ratio)
                for i, (depth, heads) in enumerate(zip(cfg.depths, cfg.num_heads))
            ]
        )

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        x = self.patch_embed(x)
        hidden = [_channels_last_norm(x)]
        x = x.movedim(1, -1)
        for stage in self.stages:
            x = stage(x)
            hidden.append(_channels_last_norm(x.movedim(-1, 1)))
        return hidden


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.conv1 = nn.Conv3d(in_ch, out_ch, 3, padding=1, bias=False)
        self.norm1 = nn.InstanceNorm3d(out_ch, affine=True)
        self.conv2 = nn.Conv3d(out_ch, out_ch, 3, padding=1, bias=False)
        self.norm2 = nn.InstanceNorm3d(out_ch, affine=True)
        self.skip = None
        if in_ch != out_ch:
            self.skip = nn.Sequential(nn.Conv3d(in_ch, out_ch, 1, bias=False), nn.InstanceNorm3d(out_ch, affine=True))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        residual = x if self.skip is None else self.skip(x)
        out = F.leaky_relu(self.norm1(self.conv1(x)), 0.01)
        out = self.norm2(self.conv2(out))
        return F.leaky_relu(out + residual, 0.01)


class UpBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.up = nn.ConvTranspose3d(in_ch, out_ch, kernel_size=2, stride=2, bias=False)
        self.block = ResBlock(2 * out_ch, out_ch)

    def forward(self, x: torch.Tensor, skip: torch.Tensor) -> torch.Tensor:
        x = self.up(x)
        x = x[..., : skip.shape[-3], : skip.shape[-2], : skip.shape[-1]]
        return self.block(torch.cat([x, skip], dim=1))


class SwinUNETR(nn.Module):
    """Encoder-decoder whose forward maps ``(B, C, D, H, W)`` to a same-shape reconstruction."""

    stage_map = {
        "swin": "encoder",
        "enc_in": "encoder",
        "enc_skips": "encoder",
        "bottleneck": "bottleneck",
        "decoders": "decoder",
        "out": "decoder",
    }

    def __init__(self, cfg: EncoderDecoderConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        fs, n = cfg.feature_size, len(cfg.depths)
        self.swin = SwinEncoder(cfg)
        self.enc_in = ResBlock(cfg.in_channels, fs)
        # skip j (1 <= j < n) refines hidden state j-1; skip n is hidden state n-1 as-is
        self.enc_skips = nn.ModuleList([ResBlock(fs * 2 ** (j - 1), fs * 2 ** (j - 1)) for j in range(1, n)])
        self.bottleneck = ResBlock(fs * 2**n, fs * 2**n)
        skip_ch = [fs] + [fs * 2 ** (j - 1) for j in range(1, n + 1)]
        decoders, prev = [], fs * 2**n
        for j in range(n, -1, -1):
            decoders.append(UpBlock(prev, skip_ch[j]))
            prev = skip_ch[j]
        self.decoders = nn.ModuleList(decoders)
        self.out = nn.Conv3d(fs, cfg.out_channels, kernel_size=1)
        self.feature_channels = fs
        self.bottleneck_channels = fs * 2**n

    def _pad(self, x: torch.Tensor) -> tuple[torch.Tensor, tuple[int, int, int]]:
        dims = tuple(x.shape[-3:])
        f = self.cfg.downsampling
        pads = [(-s) % f for s in dims]
        if any(pads):
            if not self.cfg.pad_input:
                raise ConfigError(f"input dims {dims} not divisible by {f}")
            x = F.pad(x, (0, pads[2], 0, pads[1], 0, pads[0]))
        return x, dims

    def forward_features(self, x: torch.Tensor) -> dict[str, torch.Tensor]:
        x, dims = self._pad(x)
        hidden = self.swin(x)
        n = len(self.cfg.depths)
        skips = [self.enc_in(x)]
        skips += [blk(hidden[j - 1]) for j, blk in enumerate(self.enc_skips, start=1)]
        skips.append(hidden[n - 1])
        bottleneck = self.bottleneck(hidden[n])
        y = bottleneck
        for up, skip in zip(self.decoders, reversed(skips)):
            y = up(y, skip)
        recon = self.out(y)
        if self.cfg.out_activation == "sigmoid":
            recon = torch.sigmoid(recon)
        crop = (..., slice(0, dims[0]), slice(0, dims[1]), slice(0, dims[2]))
        return {"recon": recon[crop], "features": y[crop], "bottleneck": bottleneck, "latent": hidden[n]}

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.forward_features(x)["recon"]

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        """Globally pooled bottleneck latent, ``(B, bottleneck_channels)``."""
        x, _ = self._pad(x)
        hidden = self.swin(x)
        return self.bottleneck(hidden[-1]).mean(dim=(2, 3, 4))
