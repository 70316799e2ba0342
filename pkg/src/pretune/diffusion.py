"""Noise schedule, closed-form forward noising and ancestral sampling."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import torch

from .errors import ConfigError


@dataclass(frozen=True)
class DiffusionSchedule:
    """Beta / alpha tables of a scaled-linear schedule (``sqrt(beta)`` linearly spaced).

    Timesteps are 0-based: ``x_t`` is the sample after ``t + 1`` noising steps,
    so ``alpha_bars[t] = prod(alphas[: t + 1])``.
    """

    num_train_timesteps: int = 1000
    beta_start: float = 5e-3
    beta_end: float = 2e-2
    num_inference_steps: int = 25
    kind: str = "scaled_linear"

    def __post_init__(self) -> None:
        if self.kind not in ("scaled_linear", "linear"):
            raise ConfigError(f"unknown beta schedule {self.kind!r}")
        if not 0 < self.beta_start < self.beta_end < 1:
            raise ConfigError("need 0 < beta_start < beta_end < 1")
        if not 1 <= self.num_inference_steps <= self.num_train_timesteps:
            raise ConfigError("num_inference_steps must lie in [1, num_train_timesteps]")

    @cached_property
    def betas(self) -> np.ndarray:
        n = self.num_train_timesteps
        if self.kind == "linear":
            return np.linspace(self.beta_start, self.beta_end, n, dtype=np.float64)
        return np.linspace(self.beta_start**0.5, self.beta_end**0.5, n, dtype=np.float64) ** 2

    @cached_property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    @cached_property
    def alpha_bars(self) -> np.ndarray:
        return np.cumprod(self.alphas)

    def inference_timesteps(self) -> np.ndarray:
        """Evenly spaced, descending schedule indices used by the sampler."""
        step = self.num_train_timesteps // self.num_inference_steps
        return (np.arange(self.num_inference_steps) * step)[::-1].copy()

    def check_timestep(self, t: torch.Tensor) -> None:
        if bool((t < 0).any()) or bool((t >= self.num_train_timesteps).any()):
            raise IndexError(f"timestep outside schedule [0, {self.num_train_timesteps})")


def _per_sample(values: np.ndarray, t: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    out = torch.as_tensor(values, dtype=like.dtype)[t]
    return out.reshape(-1, *([1] * (like.dim() - 1))) if out.dim() else out


def forward_diffuse(x0: torch.Tensor, t: torch.Tensor | int, noise: torch.Tensor, sched: DiffusionSchedule) -> torch.Tensor:
    """``x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) noise``; ``t`` scalar or one per batch row."""
    t = torch.as_tensor(t, dtype=torch.long)
    sched.check_timestep(t)
    ab = _per_sample(sched.alpha_bars, t, x0)
    return ab.sqrt() * x0 + (1.0 - ab).sqrt() * noise


def to_model_range(x: torch.Tensor) -> torch.Tensor:
    """``[0, 1]`` intensities -> ``[-1, 1]`` diffusion space."""
    return 2.0 * x - 1.0


def from_model_range(x: torch.Tensor) -> torch.Tensor:
    return ((x + 1.0) / 2.0).clamp(0.0, 1.0)


@torch.no_grad()
def sample_diffusion(
    model: torch.nn.Module,
    sched: DiffusionSchedule,
    shape: tuple[int, ...],
    seed: int,
    context: torch.Tensor | None = None,
    clip_sample: bool = True,
) -> torch.Tensor:
    """Ancestral sampling over ``sched.num_inference_steps`` evenly spaced indices.

    ``shape`` is ``(d, h, w)`` or a full ``(B, C, d, h, w)``. Returns a tensor in
    diffusion space (``[-1, 1]`` when ``clip_sample``); use
    :func:`from_model_range` to map back to intensities.
    """
    if len(shape) == 3:
        shape = (1, 1, *shape)
    gen = torch.Generator().manual_seed(seed)
    was_training = model.training
    model.eval()
    x = torch.randn(shape, generator=gen)
    ab = sched.alpha_bars
    steps = sched.inference_timesteps()
    for i, t in enumerate(steps):
        prev = int(steps[i + 1]) if i + 1 < len(steps) else -1
        ab_t = float(ab[t])
        ab_prev = float(ab[prev]) if prev >= 0 else 1.0
        beta_t = 1.0 - ab_t / ab_prev
        eps = model(x, torch.full((shape[0],), int(t), dtype=torch.long), context)
        x0 = (x - (1.0 - ab_t) ** 0.5 * eps) / ab_t**0.5
        if clip_sample:
            x0 = x0.clamp(-1.0, 1.0)
        # posterior q(x_prev | x_t, x0)
        mean = (ab_prev**0.5 * beta_t / (1.0 - ab_t)) * x0 + ((1.0 - beta_t) ** 0.5 * (1.0 - ab_prev) / (1.0 - ab_t)) * x
        if prev >= 0:
            var = beta_t * (1.0 - ab_prev) / (1.0 - ab_t)
            x = mean + var**0.5 * torch.randn(shape, generator=gen)
        else:
            x = mean
    model.train(was_training)
    return x
