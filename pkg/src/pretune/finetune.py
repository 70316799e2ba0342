"""Multi-task fine-tuning under the five tuning regimes, plus test-split evaluation."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import torch
import torch.nn as nn

from .data import CohortData, derive_seed, grid_patches, iter_batches
from .errors import ConfigError
from .lora import adapter_parameter_count, inject_lora
from .losses import MultiTaskWeights, SsimParams, ms_ssim_metric, multitask_loss
from .metrics import MetricReport, classification_metrics, dice_score, hausdorff_distance, mean_per_label
from .models import (
    DiffusionUNet,
    DiffusionUNetConfig,
    EncoderDecoderConfig,
    HeadConfig,
    MultiTaskNet,
    architecture_of,
    attach_heads,
    build_model,
    config_dict,
    parameter_inventory,
)
from .models.checkpoint import load_checkpoint
from .pretrain import TrainingHistory, _jsonable, epoch_generators, lr_at, make_optimizer, set_lr
from .profiler import profile_epoch
from .strategies import TuningStrategy, select_trainable
from .volume import reassemble_array

logger = logging.getLogger(__name__)

RUN_MANIFEST = "run.json"


@dataclass
class FinetuneConfig:
    epochs: int = 100
    lr_start: float = 5e-3
    lr_step_epoch: int = 50
    lr_gamma: float = 0.1
    weight_decay: float = 1e-4
    weights: MultiTaskWeights = field(default_factory=MultiTaskWeights)
    batch_size: int = 8
    patch_size: tuple[int, int, int] = (64, 64, 63)
    patches_per_subject: int = 1
    heads: HeadConfig = field(default_factory=HeadConfig)
    ssim_window: int = 7
    seed: int = 0

    def validate(self) -> None:
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.lr_start <= 0:
            raise ConfigError("lr_start must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")


# -- model preparation ---------------------------------------------------------------


def frozen_digest(model: nn.Module, names: set[str] | None = None) -> str:
    """sha256 over the raw bytes of the named (default: all non-trainable) parameters."""
    h = hashlib.sha256()
    for name, p in model.named_parameters():
        if (names is None and not p.requires_grad) or (names is not None and name in names):
            h.update(name.encode())
            h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def prepare_model(
    base: nn.Module, strategy: TuningStrategy, head_cfg: HeadConfig, seed: int
) -> tuple[MultiTaskNet, set[str]]:
    """Attach heads, inject adapters for LoRA and freeze everything outside ``select_trainable``."""
    model = attach_heads(base, head_cfg, seed=derive_seed(seed, "init", "heads"))
    if strategy.kind == "lora":
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(derive_seed(seed, "init", "lora"))
            inject_lora(model, strategy)
    trainable = select_trainable(parameter_inventory(model), strategy)
    for name, p in model.named_parameters():
        p.requires_grad_(name in trainable)
    return model, trainable


def forward_multitask(model: MultiTaskNet, batch: dict[str, torch.Tensor], w: MultiTaskWeights):
    seg_logits, cls_logits = model(batch["image"])
    return multitask_loss(torch.softmax(seg_logits, dim=1), batch["mask"], cls_logits, batch["label"], w)


def step_finetune(
    model: MultiTaskNet, optimizer: torch.optim.Optimizer, batch: dict[str, torch.Tensor], w: MultiTaskWeights
) -> dict[str, float]:
    model.train()
    terms = forward_multitask(model, batch, w)
    optimizer.zero_grad(set_to_none=True)
    terms.total.backward()
    optimizer.step()
    return {k: float(v) for k, v in terms.detached().items()}


# -- evaluation ----------------------------------------------------------------------


@torch.no_grad()
def predict_subject(model: MultiTaskNet, subject, patch_size: Sequence[int], batch_size: int = 8):
    """Grid-patch inference; returns ``(seg_probs (C, *dims), cls_logits (K,), recon (*dims))``."""
    model.eval()
    items = grid_patches(subject, patch_size)
    seg_parts, rec_parts, cls_logits = [], [], []
    for start in range(0, len(items), batch_size):
        chunk = items[start : start + batch_size]
        x = torch.from_numpy(np.stack([p["image"] for _, p in chunk]).astype(np.float32))[:, None]
        out = model.base.forward_features(x)
        seg = torch.softmax(model.seg_head(torch.cat([out["features"], out["recon"]], dim=1)), dim=1)
        cls_logits.append(model.cls_head(out["bottleneck"].mean(dim=(2, 3, 4))))
        for (origin, _), s, r in zip(chunk, seg.numpy(), out["recon"][:, 0].numpy()):
            seg_parts.append((s, origin))
            rec_parts.append((r, origin))
    dims = subject.volume.dims
    return (
        reassemble_array(seg_parts, dims),
        torch.cat(cls_logits).mean(dim=0).numpy(),
        reassemble_array(rec_parts, dims),
    )


def evaluate(
    model: MultiTaskNet, subjects: Sequence, patch_size: Sequence[int], ssim_window: int = 7
) -> MetricReport:
    """Dice, Hausdorff, classification and (for reconstruction backbones) MS-SSIM over ``subjects``."""
    dices, hds, logits, labels, ms = [], [], [], [], []
    reconstructs = not isinstance(model.base, DiffusionUNet)
    p = SsimParams(window=ssim_window)
    for subj in subjects:
        probs, cls, recon = predict_subject(model, subj, patch_size)
        pred = probs.argmax(axis=0).astype(np.uint8)
        dices.append(dice_score(pred, subj.mask))
        hds.append(hausdorff_distance(pred, subj.mask, subj.volume.spacing))
        logits.append(cls)
        labels.append(int(subj.class_label))
        if reconstructs:
            ms.append(float(ms_ssim_metric(torch.from_numpy(recon), torch.from_numpy(subj.volume.data.astype(np.float64)), p)))
    cls_m = classification_metrics(np.stack(logits), labels, model.head_cfg.cls_classes) if logits else {}
    return MetricReport(
        dice=mean_per_label(dices),
        hausdorff_mm=mean_per_label(hds),
        ms_ssim=float(np.mean(ms)) if ms else math.nan,
        cls_accuracy=cls_m.get("accuracy", math.nan),
        cls_macro_f1=cls_m.get("macro_f1", math.nan),
        confusion=cls_m.get("confusion"),
    )


# -- run -----------------------------------------------------------------------------


def _load_base(checkpoint, strategy: TuningStrategy, base_cfg, seed: int) -> tuple[nn.Module, dict[str, Any]]:
    if strategy.kind == "scratch":
        if checkpoint is not None:
            raise ConfigError("scratch training takes no checkpoint")
        if base_cfg is None:
            raise ConfigError("scratch training needs a base architecture config")
        arch = "diffusion_unet" if isinstance(base_cfg, DiffusionUNetConfig) else "swin_unetr"
        base = build_model(arch, base_cfg, seed=derive_seed(seed, "init", "scratch"))
        return base, {"provenance": "scratch", "checkpoint": None, "checkpoint_digest": None}
    if checkpoint is None:
        raise ConfigError(f"tuning strategy {strategy.kind!r} needs a pre-trained checkpoint")
    base, manifest, _ = load_checkpoint(checkpoint)
    weights = Path(checkpoint) / "weights.pt"
    return base, {
        "provenance": f"checkpoint:{manifest.get('strategy', manifest['architecture'])}",
        "checkpoint": str(checkpoint),
        "checkpoint_digest": manifest["inventory_digest"],
        "weights_sha256": hashlib.sha256(weights.read_bytes()).hexdigest(),
        "pretrain_epoch": manifest["epoch"],
    }


def run_finetune(
    checkpoint: str | Path | None,
    strategy: TuningStrategy,
    cfg: FinetuneConfig,
    data: CohortData,
    out_dir: str | Path,
    base_cfg: EncoderDecoderConfig | DiffusionUNetConfig | None = None,
    stop_after: int | None = None,
) -> tuple[MultiTaskNet, MetricReport, TrainingHistory]:
    """Fine-tune (or train from scratch) on the multi-task objective, then evaluate on ``data.test``.

    Only ``select_trainable`` parameters reach the optimiser; the bytes of every
    other parameter are hashed before and after and must match. Each epoch
    overwrites ``out_dir/state.pt`` so an interrupted run resumes exactly.
    """
    cfg.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    base, source = _load_base(checkpoint, strategy, base_cfg, cfg.seed)
    model, trainable = prepare_model(base, strategy, cfg.heads, cfg.seed)
    inv = parameter_inventory(model)
    frozen_names = set(inv.names) - trainable
    frozen_before = frozen_digest(model, frozen_names)
    body = [e for e in inv if e.stage != "head" and e.kind != "adapter"]
    body_total = sum(e.count for e in body)
    optimizer = make_optimizer([p for p in model.parameters() if p.requires_grad], cfg)

    manifest = {
        "strategy": asdict(strategy),
        "finetune_config": _jsonable(asdict(cfg)),
        "seed": cfg.seed,
        "base_architecture": architecture_of(base),
        "base_config": config_dict(base),
        **source,
        "trainable_params": inv.count_of(trainable),
        "total_params": inv.total,
        "trainable_fraction": inv.count_of(trainable) / inv.total,
        # share of the pre-trained body (no heads, no adapters): what top_fraction budgets
        "budget_fraction": sum(e.count for e in body if e.name in trainable) / body_total,
        "largest_body_entry_fraction": max(e.count for e in body) / body_total,
        "adapter_params": adapter_parameter_count(model),
        "frozen_digest": frozen_before,
        "inventory_digest": inv.digest(),
    }
    state_path = out_dir / "state.pt"
    history_path = out_dir / "history.csv"
    history = TrainingHistory()
    start = 0
    if state_path.exists():
        previous = json.loads((out_dir / RUN_MANIFEST).read_text())
        keys = ("strategy", "finetune_config", "base_config", "checkpoint_digest")
        if {k: previous.get(k) for k in keys} != _jsonable({k: manifest.get(k) for k in keys}):
            raise ConfigError(f"{out_dir} holds a fine-tuning run with a different configuration")
        state = torch.load(state_path, weights_only=False)
        model.load_state_dict(state["model"])
        optimizer.load_state_dict(state["optimizer"])
        start = state["epoch"] + 1
        history = TrainingHistory([r for r in TrainingHistory.from_csv(history_path).rows if r["epoch"] < start])
        logger.info("resuming %s fine-tuning at epoch %d", strategy.kind, start)
    _write_manifest(out_dir, manifest)

    for epoch in range(start, cfg.epochs):
        if stop_after is not None and len(history) >= stop_after:
            break
        lr = lr_at(epoch, cfg)
        set_lr(optimizer, lr)
        rng, _ = epoch_generators(derive_seed(cfg.seed, "finetune"), epoch)

        def work() -> dict[str, float]:
            totals: dict[str, float] = {}
            n = 0
            for batch in iter_batches(data.train, cfg.patch_size, cfg.batch_size, rng, cfg.patches_per_subject):
                for k, v in step_finetune(model, optimizer, batch, cfg.weights).items():
                    totals[k] = totals.get(k, 0.0) + v
                n += 1
            return {k: v / max(n, 1) for k, v in totals.items()}

        losses, profile = profile_epoch(work)
        row: dict[str, Any] = {"epoch": epoch, "lr": lr, **{f"loss_{k}": v for k, v in losses.items()}}
        row.update(_validate(model, data.val, cfg))
        row.update(sec_epoch=profile.seconds_per_epoch, mem_frac=profile.avg_mem_frac, power_frac=profile.avg_power_frac)
        row["peak_mem_frac"] = profile.peak_mem_frac
        history.append(row)
        torch.save({"model": model.state_dict(), "optimizer": optimizer.state_dict(), "epoch": epoch}, state_path.with_suffix(".tmp"))
        state_path.with_suffix(".tmp").replace(state_path)
        history.to_csv(history_path)
        logger.info("%s epoch %d lr=%.2e loss=%.4f", strategy.kind, epoch, lr, row.get("loss_total", math.nan))

    if frozen_digest(model, frozen_names) != frozen_before:
        raise RuntimeError("frozen parameters changed during fine-tuning")
    report = evaluate(model, data.test, cfg.patch_size, cfg.ssim_window)
    report.history_path = str(history_path)
    manifest["complete"] = len(history) == cfg.epochs
    manifest["frozen_verified"] = True
    _write_manifest(out_dir, manifest)
    (out_dir / "metrics.json").write_text(json.dumps(_jsonable(report.to_dict()), indent=2, sort_keys=True))
    return model, report, history


@torch.no_grad()
def _validate(model: MultiTaskNet, subjects: Sequence, cfg: FinetuneConfig) -> dict[str, float]:
    if not subjects:
        return {}
    rng = np.random.default_rng(derive_seed(cfg.seed, "val"))
    model.eval()
    values = [
        float(forward_multitask(model, b, cfg.weights).total)
        for b in iter_batches(subjects, cfg.patch_size, cfg.batch_size, rng)
    ]
    return {"val_loss": float(np.mean(values))}


def _write_manifest(out_dir: Path, manifest: dict[str, Any]) -> None:
    tmp = out_dir / (RUN_MANIFEST + ".tmp")
    tmp.write_text(json.dumps(_jsonable(manifest), indent=2, sort_keys=True))
    tmp.replace(out_dir / RUN_MANIFEST)
