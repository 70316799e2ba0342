"""Per-epoch resource profiling: wall-clock time, device/process memory and power."""

from __future__ import annotations

import math
import os
import threading
import time
from dataclasses import asdict, dataclass
from typing import Callable, TypeVar

import psutil
import torch

T = TypeVar("T")

DEFAULT_HZ = 2.0


@dataclass
class ResourceProfile:
    """Resource usage of one epoch.

    Memory fractions are device memory over device capacity on CUDA, and
    process RSS over total system memory otherwise. ``avg_power_frac`` is
    ``None`` when the platform exposes no power readings.
    """

    peak_mem_frac: float
    avg_mem_frac: float
    avg_power_frac: float | None
    seconds_per_epoch: float
    samples: int = 0
    device: str = "cpu"

    def to_dict(self) -> dict:
        return asdict(self)


def _sample_hz() -> float:
    raw = os.environ.get("PROFILE_HZ")
    if not raw:
        return DEFAULT_HZ
    hz = float(raw)
    if not hz > 0:
        raise ValueError(f"PROFILE_HZ must be positive, got {raw!r}")
    return hz


class _PowerReader:
    """NVML-backed power reader; silently unavailable without an NVIDIA driver."""

    def __init__(self) -> None:
        self.handle = None
        if not torch.cuda.is_available():
            return
        try:
            import pynvml  # type: ignore[import-not-found]

            pynvml.nvmlInit()
            self._nvml = pynvml
            self.handle = pynvml.nvmlDeviceGetHandleByIndex(torch.cuda.current_device())
            self.limit = pynvml.nvmlDeviceGetEnforcedPowerLimit(self.handle)
        except Exception:
            self.handle = None

    def read(self) -> float | None:
        if self.handle is None:
            return None
        try:
            return self._nvml.nvmlDeviceGetPowerUsage(self.handle) / self.limit
        except Exception:
            return None


def _memory_fraction() -> float:
    if torch.cuda.is_available():
        free, total = torch.cuda.mem_get_info()
        return (total - free) / total
    rss = psutil.Process().memory_info().rss
    return min(rss / psutil.virtual_memory().total, 1.0)


def profile_epoch(work: Callable[[], T], hz: float | None = None) -> tuple[T, ResourceProfile]:
    """Run ``work`` while a background thread samples memory and power at ``hz``.

    The sampler only reads process/device counters; it never touches
    training state. Returns ``(work(), profile)``.
    """
    hz = hz or _sample_hz()
    power = _PowerReader()
    mem_samples: list[float] = []
    power_samples: list[float] = []
    stop = threading.Event()

    def sample() -> None:
        mem_samples.append(_memory_fraction())
        p = power.read()
        if p is not None:
            power_samples.append(p)

    def loop() -> None:
        while not stop.wait(1.0 / hz):
            sample()

    sample()
    thread = threading.Thread(target=loop, name="profile-sampler", daemon=True)
    start = time.perf_counter()
    thread.start()
    try:
        result = work()
    finally:
        elapsed = time.perf_counter() - start
        stop.set()
        thread.join()
    sample()
    profile = ResourceProfile(
        peak_mem_frac=max(mem_samples),
        avg_mem_frac=sum(mem_samples) / len(mem_samples),
        avg_power_frac=(sum(power_samples) / len(power_samples)) if power_samples else None,
        seconds_per_epoch=max(elapsed, math.ulp(1.0)),
        samples=len(mem_samples),
        device="cuda" if torch.cuda.is_available() else "cpu",
    )
    return result, profile
