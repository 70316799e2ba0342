"""Tuning strategies and the parameter-selection rule each one implies."""

from __future__ import annotations

from dataclasses import dataclass

from . import TUNE_STRATEGIES
from .errors import ConfigError, StrategyError
from .models.inventory import ParameterInventory


@dataclass(frozen=True)
class TuningStrategy:
    """Which parameters a fine-tuning run may update.

    ``top_fraction`` is a share of the parameter count, measured over the
    non-head inventory in dataflow order. Heads are always trainable and sit
    outside that budget.
    """

    kind: str = "full"
    top_fraction: float = 0.10
    lora_rank: int = 8
    lora_alpha: float = 8.0
    lora_targets: tuple[str, ...] = ("linear",)

    def __post_init__(self) -> None:
        if self.kind not in TUNE_STRATEGIES:
            raise ConfigError(f"unknown tuning strategy {self.kind!r}")
        if not 0 < self.top_fraction <= 1:
            raise ConfigError("top_fraction must lie in (0, 1]")
        if self.lora_rank < 1:
            raise ConfigError("lora_rank must be >= 1")
        if tuple(self.lora_targets) != ("linear",):
            raise ConfigError("only linear-kind LoRA targets are supported")

    @property
    def lora_scale(self) -> float:
        return self.lora_alpha / self.lora_rank


def top_suffix(inv: ParameterInventory, fraction: float) -> list[str]:
    """Minimal suffix of the non-head, non-adapter inventory whose count reaches ``fraction`` of its total."""
    body = [e for e in inv if e.stage != "head" and e.kind != "adapter"]
    budget = fraction * sum(e.count for e in body)
    picked, total = [], 0
    for e in reversed(body):
        if total >= budget:
            break
        picked.append(e.name)
        total += e.count
    return picked[::-1]


def select_trainable(inv: ParameterInventory, s: TuningStrategy) -> set[str]:
    if not len(inv):
        raise StrategyError("empty parameter inventory")
    heads = {e.name for e in inv if e.stage == "head"}
    if s.kind in ("full", "scratch"):
        chosen = set(inv.names)
    elif s.kind == "decoder":
        chosen = {e.name for e in inv if e.stage == "decoder"} | heads
    elif s.kind == "top":
        chosen = set(top_suffix(inv, s.top_fraction)) | heads
    else:
        chosen = {e.name for e in inv if e.kind == "adapter"} | heads
    if not chosen:
        raise StrategyError(f"strategy {s.kind!r} selects no parameters")
    return chosen
