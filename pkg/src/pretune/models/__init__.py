"""Network constructors, task heads, parameter inventory and checkpoints."""

from __future__ import annotations

from dataclasses import asdict

import torch
import torch.nn as nn

from .diffusion_unet import DiffusionUNet, DiffusionUNetConfig
from .discriminator import Discriminator, DiscriminatorConfig
from .heads import HeadConfig, MultiTaskNet
from .inventory import InventoryEntry, ParameterInventory, parameter_inventory
from .swin_unetr import EncoderDecoderConfig, SwinUNETR

__all__ = [
    "DiffusionUNet",
    "DiffusionUNetConfig",
    "Discriminator",
    "DiscriminatorConfig",
    "EncoderDecoderConfig",
    "HeadConfig",
    "InventoryEntry",
    "MultiTaskNet",
    "ParameterInventory",
    "SwinUNETR",
    "architecture_of",
    "attach_heads",
    "config_dict",
    "build_diffusion_unet",
    "build_discriminator",
    "build_encoder_decoder",
    "build_model",
    "parameter_inventory",
]

ARCHITECTURES = {
    "swin_unetr": (SwinUNETR, EncoderDecoderConfig),
    "diffusion_unet": (DiffusionUNet, DiffusionUNetConfig),
    "discriminator": (Discriminator, DiscriminatorConfig),
}


def _seeded(factory, seed: int):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return factory()


def build_encoder_decoder(cfg: EncoderDecoderConfig, seed: int = 0) -> SwinUNETR:
    return _seeded(lambda: SwinUNETR(cfg), seed)


def build_diffusion_unet(cfg: DiffusionUNetConfig, seed: int = 0) -> DiffusionUNet:
    return _seeded(lambda: DiffusionUNet(cfg), seed)


def build_discriminator(cfg: DiscriminatorConfig, seed: int = 0) -> Discriminator:
    return _seeded(lambda: Discriminator(cfg), seed)


def attach_heads(model: nn.Module, head_cfg: HeadConfig | None = None, seed: int = 0) -> MultiTaskNet:
    """Wrap ``model`` with freshly initialised heads; the backbone's weights are not touched."""
    return _seeded(lambda: MultiTaskNet(model, head_cfg or HeadConfig()), seed)


def architecture_of(model: nn.Module) -> str:
    for name, (cls, _) in ARCHITECTURES.items():
        if isinstance(model, cls):
            return name
    raise TypeError(f"unknown architecture {type(model).__name__}")


def config_dict(model: nn.Module) -> dict:
    return asdict(model.cfg)


def build_model(arch: str, cfg: dict | object, seed: int = 0) -> nn.Module:
    try:
        cls, cfg_cls = ARCHITECTURES[arch]
    except KeyError:
        raise ValueError(f"unknown architecture {arch!r}") from None
    if isinstance(cfg, dict):
        cfg = cfg_cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in cfg.items()})
    return _seeded(lambda: cls(cfg), seed)
