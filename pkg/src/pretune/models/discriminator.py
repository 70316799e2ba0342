"""Patch discriminator producing one real/fake logit per volume."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from ..errors import ConfigError


@dataclass
class DiscriminatorConfig:
    in_channels: int = 1
    base_channels: int = 16
    num_blocks: int = 4

    def validate(self) -> None:
        if self.base_channels < 1 or self.num_blocks < 1:
            raise ConfigError("discriminator needs base_channels >= 1 and num_blocks >= 1")


class Discriminator(nn.Module):
    """Strided 3D conv stack (no normalisation) followed by global pooling and a linear logit."""

    stage_map = {"blocks": "encoder", "logit": "head"}

    def __init__(self, cfg: DiscriminatorConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        layers, prev = [], cfg.in_channels
        for i in range(cfg.num_blocks):
            out = cfg.base_channels * 2**i
            layers += [nn.Conv3d(prev, out, kernel_size=4, stride=2, padding=1), nn.LeakyReLU(0.2)]
            prev = out
        self.blocks = nn.Sequential(*layers)
        self.logit = nn.Linear(prev, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.blocks(x).mean(dim=(2, 3, 4))
        return self.logit(h).squeeze(-1)
