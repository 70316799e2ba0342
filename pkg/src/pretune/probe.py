"""Evaluation of pre-trained backbones: reconstruction MS-SSIM and an optional linear probe.

The linear probe fits a softmax classifier on frozen, subject-averaged
bottleneck features. It is an added diagnostic for the classification
column of pre-training rows, not a claim about how those numbers were
originally produced.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import derive_seed, grid_patches
from .diffusion import DiffusionSchedule, forward_diffuse, from_model_range, to_model_range
from .losses import SsimParams, ms_ssim_metric
from .metrics import MetricReport, classification_metrics
from .models import DiffusionUNet
from .volume import reassemble_array


def probe_timestep(sched: DiffusionSchedule) -> int:
    """Lowest non-zero index of the inference schedule: a lightly noised input."""
    steps = sched.inference_timesteps()
    return int(steps[-2]) if len(steps) > 1 else int(steps[0])


@torch.no_grad()
def reconstruct_subject(
    model: nn.Module, subject, patch_size: Sequence[int], sched: DiffusionSchedule | None = None, seed: int = 0
) -> np.ndarray:
    """Grid-patch reconstruction in ``[0, 1]``; diffusion models give their one-step ``x0`` estimate."""
    model.eval()
    parts = []
    for origin, item in grid_patches(subject, patch_size):
        x = torch.from_numpy(item["image"].astype(np.float32))[None, None]
        if isinstance(model, DiffusionUNet):
            sched = sched or DiffusionSchedule()
            t = probe_timestep(sched)
            gen = torch.Generator().manual_seed(derive_seed(seed, "probe", subject.id, *origin))
            noise = torch.randn(x.shape, generator=gen)
            x_t = forward_diffuse(to_model_range(x), t, noise, sched)
            ab = float(sched.alpha_bars[t])
            x0 = (x_t - (1.0 - ab) ** 0.5 * model(x_t, t)) / ab**0.5
            recon = from_model_range(x0.clamp(-1.0, 1.0))
        else:
            recon = model(x)
        parts.append((recon[0, 0].numpy(), origin))
    return reassemble_array(parts, subject.volume.dims)


@torch.no_grad()
def subject_features(model: nn.Module, subject, patch_size: Sequence[int]) -> np.ndarray:
    """Bottleneck features pooled over space and averaged over the subject's grid patches."""
    model.eval()
    feats = []
    for _, item in grid_patches(subject, patch_size):
        x = torch.from_numpy(item["image"].astype(np.float32))[None, None]
        feats.append(model.forward_features(x)["bottleneck"].mean(dim=(2, 3, 4))[0])
    return torch.stack(feats).mean(dim=0).double().numpy()


def linear_probe(
    model: nn.Module,
    train: Sequence,
    test: Sequence,
    patch_size: Sequence[int],
    n_classes: int = 3,
    l2: float = 1e-3,
) -> dict:
    """Softmax regression on frozen features, fitted with L-BFGS on ``train`` and scored on ``test``."""
    if not train or not test:
        return {"accuracy": math.nan, "macro_f1": math.nan, "confusion": None}
    xtr = torch.from_numpy(np.stack([subject_features(model, s, patch_size) for s in train]))
    ytr = torch.tensor([int(s.class_label) for s in train])
    xte = torch.from_numpy(np.stack([subject_features(model, s, patch_size) for s in test]))
    mu, sd = xtr.mean(0), xtr.std(0).clamp_min(1e-8)
    xtr, xte = (xtr - mu) / sd, (xte - mu) / sd
    w = torch.zeros(xtr.shape[1], n_classes, dtype=torch.float64, requires_grad=True)
    b = torch.zeros(n_classes, dtype=torch.float64, requires_grad=True)
    opt = torch.optim.LBFGS([w, b], max_iter=200, line_search_fn="strong_wolfe")

    def closure():
        opt.zero_grad()
        loss = F.cross_entropy(xtr @ w + b, ytr) + l2 * (w**2).sum()
        loss.backward()
        return loss

    opt.step(closure)
    with torch.no_grad():
        logits = (xte @ w + b).numpy()
    return classification_metrics(logits, [int(s.class_label) for s in test], n_classes)


def evaluate_pretrain(
    model: nn.Module,
    data,
    patch_size: Sequence[int],
    sched: DiffusionSchedule | None = None,
    ssim_window: int = 7,
    probe: bool = True,
    seed: int = 0,
) -> MetricReport:
    """MS-SSIM of test reconstructions plus (optionally) linear-probe classification; no segmentation."""
    p = SsimParams(window=ssim_window)
    scores = []
    for subj in data.test:
        recon = reconstruct_subject(model, subj, patch_size, sched, seed)
        target = torch.from_numpy(subj.volume.data.astype(np.float64))
        scores.append(float(ms_ssim_metric(torch.from_numpy(recon), target, p)))
    cls = linear_probe(model, data.train, data.test, patch_size) if probe else {}
    return MetricReport(
        ms_ssim=float(np.mean(scores)) if scores else math.nan,
        cls_accuracy=cls.get("accuracy", math.nan),
        cls_macro_f1=cls.get("macro_f1", math.nan),
        confusion=cls.get("confusion"),
    )
