"""Loss functions and similarity measures.

All functions operate on torch tensors and are differentiable. Spatial inputs
are 3D grids, optionally preceded by batch and channel axes
(``(D, H, W)``, ``(C, D, H, W)`` or ``(B, C, D, H, W)``).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .errors import DegenerateInputError

# Standard 5-scale MS-SSIM exponents; truncated and renormalised for fewer levels.
MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)


@dataclass(frozen=True)
class SsimParams:
    """Stabilisers and window of the structural similarity index.

    Defaults follow the conventional SSIM constants ``c1 = (0.01 L)^2`` and
    ``c2 = (0.03 L)^2`` with ``L = 1`` for normalised intensities.
    """

    c1: float = 1e-4
    c2: float = 9e-4
    window: int = 7
    dynamic_range: float = 1.0

    def __post_init__(self) -> None:
        if self.c1 <= 0 or self.c2 <= 0:
            raise ValueError("SSIM stabilisers c1 and c2 must be positive")
        if self.window < 3 or self.window % 2 == 0:
            raise ValueError(f"SSIM window must be odd and >= 3, got {self.window}")

    @classmethod
    def for_range(cls, dynamic_range: float, window: int = 7) -> "SsimParams":
        return cls((0.01 * dynamic_range) ** 2, (0.03 * dynamic_range) ** 2, window, dynamic_range)


@dataclass
class LossTerms:
    """A scalar loss plus its named addends, for logging."""

    total: torch.Tensor
    components: dict[str, torch.Tensor] = field(default_factory=dict)

    def detached(self) -> dict[str, float]:
        out = {"total": float(self.total.detach())}
        out.update({k: float(v.detach()) for k, v in self.components.items()})
        return out


def _as_5d(x: torch.Tensor) -> torch.Tensor:
    if x.dim() == 3:
        return x[None, None]
    if x.dim() == 4:
        return x[None]
    if x.dim() == 5:
        return x
    raise ValueError(f"expected a 3D grid with optional batch/channel axes, got shape {tuple(x.shape)}")


def _local_stats(x: torch.Tensor, y: torch.Tensor, window: int):
    """Windowed means, variances and covariance (population form, valid positions only)."""
    kernel = tuple(min(window, s) for s in x.shape[-3:])
    pool = lambda t: F.avg_pool3d(t, kernel, stride=1)  # noqa: E731
    mu_x, mu_y = pool(x), pool(y)
    var_x = pool(x * x) - mu_x**2
    var_y = pool(y * y) - mu_y**2
    cov = pool(x * y) - mu_x * mu_y
    return mu_x, mu_y, var_x, var_y, cov


def _ssim_cs(x: torch.Tensor, y: torch.Tensor, p: SsimParams) -> tuple[torch.Tensor, torch.Tensor]:
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")
    x, y = _as_5d(x), _as_5d(y)
    mu_x, mu_y, var_x, var_y, cov = _local_stats(x, y, p.window)
    luminance = (2 * mu_x * mu_y + p.c1) / (mu_x**2 + mu_y**2 + p.c1)
    cs = (2 * cov + p.c2) / (var_x + var_y + p.c2)
    return (luminance * cs).mean(), cs.mean()


def ssim(x: torch.Tensor, y: torch.Tensor, p: SsimParams = SsimParams()) -> torch.Tensor:
    """Mean local SSIM over all valid window positions.

    The window is clamped to the grid extent on axes shorter than
    ``p.window``; with a window equal to the whole grid this is the global
    (single-window) SSIM.
    """
    return _ssim_cs(x, y, p)[0]


def loss_rec(x: torch.Tensor, y: torch.Tensor, p: SsimParams = SsimParams()) -> torch.Tensor:
    """Reconstruction loss ``1 - ssim(x, y)``; zero for identical inputs."""
    return 1.0 - ssim(x, y, p)


def ms_ssim_metric(x: torch.Tensor, y: torch.Tensor, p: SsimParams = SsimParams(), levels: int = 3) -> torch.Tensor:
    """Multi-scale SSIM across ``levels`` dyadic 2x average-pool downsamplings.

    Contrast-structure terms of the finer levels and the full SSIM of the
    coarsest level are combined as a weighted geometric product. Evaluation
    only; terms are clamped at zero for levels > 1 so fractional powers stay real.
    """
    if not 1 <= levels <= len(MS_SSIM_WEIGHTS):
        raise ValueError(f"levels must be in [1, {len(MS_SSIM_WEIGHTS)}]")
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")
    w = torch.tensor(MS_SSIM_WEIGHTS[:levels], dtype=x.dtype)
    w = w / w.sum()
    x, y = _as_5d(x), _as_5d(y)
    if levels == 1:
        return ssim(x, y, p)
    value = torch.ones((), dtype=x.dtype)
    for level in range(levels):
        full, cs = _ssim_cs(x, y, p)
        term = full if level == levels - 1 else cs
        value = value * torch.clamp(term, min=0.0) ** w[level]
        if level < levels - 1:
            if min(x.shape[-3:]) < 2:
                raise ValueError("grid too small for the requested number of MS-SSIM levels")
            x, y = F.avg_pool3d(x, 2), F.avg_pool3d(y, 2)
    return value


def _bce_with_logits(logits: torch.Tensor, target: float) -> torch.Tensor:
    if logits.numel() == 0:
        raise ValueError("discriminator predictions must be non-empty")
    return F.binary_cross_entropy_with_logits(logits, torch.full_like(logits, target))


def disc_loss(pred_on_fake: torch.Tensor, pred_on_real: torch.Tensor) -> torch.Tensor:
    """Discriminator loss: mean of CE(fake logits, 0) and CE(real logits, 1)."""
    return 0.5 * (_bce_with_logits(pred_on_fake, 0.0) + _bce_with_logits(pred_on_real, 1.0))


def gen_loss(pred_on_fake: torch.Tensor) -> torch.Tensor:
    """Generator loss: CE of the discriminator's logits on generated input against the real label."""
    return _bce_with_logits(pred_on_fake, 1.0)


@dataclass
class ContrastiveBatch:
    """``2N`` embeddings with a positive-pair index map.

    ``pairs[i]`` is the positive partner of anchor ``i``. When omitted, the
    two views are assumed stacked: ``i <-> i + N``.
    """

    embeddings: torch.Tensor
    temperature: float = 0.5
    pairs: torch.Tensor | None = None

    def __post_init__(self) -> None:
        n2 = self.embeddings.shape[0]
        if self.embeddings.dim() != 2 or n2 < 4 or n2 % 2:
            raise ValueError(f"need an even number >= 4 of embedding rows, got shape {tuple(self.embeddings.shape)}")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.pairs is None:
            half = n2 // 2
            self.pairs = torch.cat([torch.arange(half, n2), torch.arange(half)])
        self.pairs = torch.as_tensor(self.pairs, dtype=torch.long)
        idx = torch.arange(n2)
        if (
            self.pairs.shape != (n2,)
            or bool((self.pairs[self.pairs] != idx).any())
            or bool((self.pairs == idx).any())
        ):
            raise ValueError("pairs must be an involution without fixed points (each index in exactly one pair)")


def ntxent_loss(batch: ContrastiveBatch) -> torch.Tensor:
    """Normalised temperature-scaled cross entropy, averaged over all ``2N`` anchors."""
    z = batch.embeddings
    norms = z.norm(dim=1, keepdim=True)
    if bool((norms == 0).any()):
        raise DegenerateInputError("zero-norm embedding in contrastive batch")
    z = z / norms
    logits = z @ z.T / batch.temperature
    self_mask = torch.eye(z.shape[0], dtype=torch.bool)
    logits = logits.masked_fill(self_mask, float("-inf"))
    return F.cross_entropy(logits, batch.pairs)


def contrastive_total(x_rec: torch.Tensor, y: torch.Tensor, p: SsimParams, batch: ContrastiveBatch) -> LossTerms:
    rec = loss_rec(x_rec, y, p)
    con = ntxent_loss(batch)
    return LossTerms(rec + con, {"rec": rec, "con": con})


DICE_EPS = 1e-5


def one_hot_labels(target: torch.Tensor, num_classes: int = 3) -> torch.Tensor:
    """``(B, D, H, W)`` or ``(D, H, W)`` integer labels -> channels-first one-hot of matching rank + 1."""
    oh = F.one_hot(target.long(), num_classes)
    return oh.movedim(-1, 1 if target.dim() == 4 else 0).to(torch.get_default_dtype())


def dice_loss(
    pred_probs: torch.Tensor,
    target: torch.Tensor,
    labels: tuple[int, ...] = (1, 2),
    eps: float = DICE_EPS,
) -> torch.Tensor:
    """Soft dice loss averaged over foreground labels.

    ``pred_probs`` is ``(B, C, D, H, W)`` or ``(C, D, H, W)``; ``target`` holds
    integer labels with the same spatial (and batch) shape. Sums run over
    batch and space jointly.
    """
    channel_axis = 1 if pred_probs.dim() == 5 else 0
    if pred_probs.dim() not in (4, 5) or target.shape != pred_probs.shape[:channel_axis] + pred_probs.shape[channel_axis + 1 :]:
        raise ValueError(f"incompatible shapes {tuple(pred_probs.shape)} and {tuple(target.shape)}")
    scores = []
    for label in labels:
        p = pred_probs.select(channel_axis, label)
        g = (target == label).to(p.dtype)
        scores.append((2 * (p * g).sum() + eps) / (p.sum() + g.sum() + eps))
    return 1.0 - torch.stack(scores).mean()


@dataclass(frozen=True)
class MultiTaskWeights:
    seg: float = 0.85
    cls: float = 0.15

    def __post_init__(self) -> None:
        if self.seg < 0 or self.cls < 0:
            raise ValueError("multi-task weights must be non-negative")


def multitask_loss(
    seg_pred: torch.Tensor,
    seg_target: torch.Tensor,
    cls_logits: torch.Tensor,
    cls_target: torch.Tensor,
    w: MultiTaskWeights = MultiTaskWeights(),
) -> LossTerms:
    """``w.seg * dice_loss + w.cls * CE``; ``seg_pred`` holds per-voxel probabilities."""
    seg = dice_loss(seg_pred, seg_target)
    cls = F.cross_entropy(cls_logits, cls_target.long())
    return LossTerms(w.seg * seg + w.cls * cls, {"seg": seg, "cls": cls})

