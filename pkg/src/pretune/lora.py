"""Low-rank adapters on linear layers: injection, freezing and merge-back."""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import StrategyError
from .models.inventory import parameter_inventory
from .strategies import TuningStrategy


class LoraLinear(nn.Linear):
    """``base(x) + scale * B(A(x))`` sharing ``weight``/``bias`` with the wrapped layer.

    Parameter names of the host layer are preserved, so checkpoint entries and
    frozen-weight digests still line up after injection.
    """

    def __init__(self, base: nn.Linear, rank: int, alpha: float):
        nn.Module.__init__(self)
        self.in_features = base.in_features
        self.out_features = base.out_features
        self.weight = base.weight
        self.bias = base.bias
        self.rank = rank
        self.scale = alpha / rank
        self.lora_A = nn.Parameter(torch.empty(rank, self.in_features, dtype=base.weight.dtype))
        self.lora_B = nn.Parameter(torch.zeros(self.out_features, rank, dtype=base.weight.dtype))
        nn.init.kaiming_uniform_(self.lora_A, a=math.sqrt(5))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.linear(x, self.weight, self.bias) + self.scale * F.linear(F.linear(x, self.lora_A), self.lora_B)

    def merged(self) -> nn.Linear:
        out = nn.Linear(self.in_features, self.out_features, bias=self.bias is not None)
        with torch.no_grad():
            out.weight = nn.Parameter(self.weight + self.scale * (self.lora_B @ self.lora_A))
            if self.bias is not None:
                out.bias = self.bias
        return out

    def extra_repr(self) -> str:
        return f"{super().extra_repr()}, rank={self.rank}, scale={self.scale:g}"


def _set_child(root: nn.Module, path: str, module: nn.Module) -> None:
    parent_path, _, leaf = path.rpartition(".")
    parent = root.get_submodule(parent_path) if parent_path else root
    setattr(parent, leaf, module)


def lora_targets(model: nn.Module) -> list[str]:
    """Module paths of plain linear layers outside the task heads."""
    stages = {e.name.rsplit(".", 1)[0]: e.stage for e in parameter_inventory(model) if e.name.endswith(".weight")}
    return [
        name
        for name, m in model.named_modules()
        if type(m) is nn.Linear and stages.get(name) != "head"
    ]


def inject_lora(model: nn.Module, s: TuningStrategy) -> nn.Module:
    """Wrap every targeted linear layer in place and freeze everything except adapters and heads."""
    if getattr(model, "lora_state", None) is not None:
        raise StrategyError(f"model already carries LoRA state {model.lora_state!r}")
    targets = lora_targets(model)
    if not targets:
        raise StrategyError("model has no linear layers eligible for LoRA")
    for path in targets:
        _set_child(model, path, LoraLinear(model.get_submodule(path), s.lora_rank, s.lora_alpha))
    heads = {e.name for e in parameter_inventory(model) if e.stage == "head"}
    for name, p in model.named_parameters():
        p.requires_grad_(name.rsplit(".", 1)[-1] in ("lora_A", "lora_B") or name in heads)
    model.lora_state = "adapted"
    return model


def adapter_parameter_count(model: nn.Module) -> int:
    return sum(m.lora_A.numel() + m.lora_B.numel() for m in model.modules() if isinstance(m, LoraLinear))


def merge_lora(model: nn.Module) -> nn.Module:
    """Fold ``scale * B @ A`` into each base weight and drop the adapters."""
    state = getattr(model, "lora_state", None)
    if state != "adapted":
        raise StrategyError("merge_lora needs an adapted, not yet merged, model" + (f" (state {state!r})" if state else ""))
    for path, m in list(model.named_modules()):
        if isinstance(m, LoraLinear):
            _set_child(model, path, m.merged())
    model.lora_state = "merged"
    return model
