"""Ordered, named, counted listing of a model's parameters."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import torch.nn as nn

KINDS = ("linear", "conv", "norm", "embedding", "adapter", "other")
STAGES = ("encoder", "bottleneck", "decoder", "head")

_NORMS = (nn.LayerNorm, nn.GroupNorm, nn.modules.batchnorm._NormBase)
_CONVS = (nn.modules.conv._ConvNd,)


@dataclass(frozen=True)
class InventoryEntry:
    name: str
    kind: str
    count: int
    stage: str
    trainable: bool
    shape: tuple[int, ...]


@dataclass(frozen=True)
class ParameterInventory:
    entries: tuple[InventoryEntry, ...]

    def __iter__(self):
        return iter(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def total(self) -> int:
        return sum(e.count for e in self.entries)

    @property
    def names(self) -> list[str]:
        return [e.name for e in self.entries]

    def count_of(self, names) -> int:
        names = set(names)
        return sum(e.count for e in self.entries if e.name in names)

    def digest(self) -> str:
        """Architecture fingerprint: names, shapes, kinds and stages (trainability excluded)."""
        rows = [[e.name, list(e.shape), e.kind, e.stage] for e in self.entries]
        return hashlib.sha256(json.dumps(rows).encode()).hexdigest()


def _kind(module: nn.Module, pname: str) -> str:
    if pname in ("lora_A", "lora_B"):
        return "adapter"
    if isinstance(module, nn.Linear):
        return "linear"
    if isinstance(module, _CONVS):
        return "conv"
    if isinstance(module, _NORMS):
        return "norm"
    if isinstance(module, nn.Embedding) or pname.endswith("bias_table") or pname == "null_context":
        return "embedding"
    return "other"


def _stage(model: nn.Module, path: list[str]) -> str:
    stage_map = getattr(model, "stage_map", {})
    head = path[0]
    if head in stage_map:
        return stage_map[head]
    child = getattr(model, head, None)
    if isinstance(child, nn.Module) and len(path) > 1:
        return _stage(child, path[1:])
    return "encoder"


def parameter_inventory(model: nn.Module) -> ParameterInventory:
    """List parameters in registration order, which every model here keeps equal to forward dataflow."""
    entries = []
    for mod_name, module in model.named_modules():
        for pname, param in module.named_parameters(recurse=False):
            name = f"{mod_name}.{pname}" if mod_name else pname
            entries.append(
                InventoryEntry(
                    name=name,
                    kind=_kind(module, pname),
                    count=param.numel(),
                    stage=_stage(model, name.split(".")),
                    trainable=param.requires_grad,
                    shape=tuple(param.shape),
                )
            )
    return ParameterInventory(tuple(entries))
