"""Segmentation and classification heads attached for multi-task fine-tuning."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from ..errors import ConfigError


@dataclass
class HeadConfig:
    seg_labels: int = 3
    cls_classes: int = 3
    # initial background probability of the segmentation head (class-prior bias init)
    seg_background_prior: float = 0.9

    def validate(self) -> None:
        if self.seg_labels < 1 or self.cls_classes < 1:
            raise ConfigError("head class counts must be positive")
        if not 0 < self.seg_background_prior < 1:
            raise ConfigError("seg_background_prior must lie in (0, 1)")


class MultiTaskNet(nn.Module):
    """Wraps a pre-trained backbone with a per-voxel segmentation head and a subject-level classifier.

    The segmentation head reads the backbone's full-resolution decoder features
    together with its reconstruction output; the classifier pools the
    bottleneck. ``forward`` returns ``(seg_logits, cls_logits)``.
    """

    stage_map = {"seg_head": "head", "cls_head": "head"}

    def __init__(self, base: nn.Module, head_cfg: HeadConfig):
        super().__init__()
        head_cfg.validate()
        self.base = base
        self.head_cfg = head_cfg
        feat = base.feature_channels
        recon_ch = getattr(base.cfg, "out_channels", getattr(base.cfg, "in_channels", 1))
        self.seg_head = nn.Sequential(
            nn.Conv3d(feat + recon_ch, feat, 3, padding=1),
            nn.InstanceNorm3d(feat, affine=True),
            nn.LeakyReLU(0.01),
            nn.Conv3d(feat, head_cfg.seg_labels, 1),
        )
        if head_cfg.seg_labels > 1:
            rest = (1.0 - head_cfg.seg_background_prior) / (head_cfg.seg_labels - 1)
            with torch.no_grad():
                self.seg_head[-1].bias.copy_(
                    torch.log(torch.tensor([head_cfg.seg_background_prior] + [rest] * (head_cfg.seg_labels - 1)))
                )
        self.cls_head = nn.Linear(base.bottleneck_channels, head_cfg.cls_classes)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        out = self.base.forward_features(x)
        seg = self.seg_head(torch.cat([out["features"], out["recon"]], dim=1))
        cls = self.cls_head(out["bottleneck"].mean(dim=(2, 3, 4)))
        return seg, cls
