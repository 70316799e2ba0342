"""Self-supervised pre-training loops: reconstruction, adversarial, contrastive, diffusion."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import PRETRAIN_STRATEGIES
from .data import CohortData, derive_seed, iter_batches
from .diffusion import DiffusionSchedule, forward_diffuse, to_model_range
from .errors import ConfigError
from .losses import ContrastiveBatch, SsimParams, disc_loss, gen_loss, loss_rec, ntxent_loss, ssim
from .models import (
    DiffusionUNetConfig,
    DiscriminatorConfig,
    EncoderDecoderConfig,
    build_diffusion_unet,
    build_discriminator,
    build_encoder_decoder,
)
from .models.checkpoint import load_checkpoint, read_manifest, save_checkpoint
from .profiler import profile_epoch

logger = logging.getLogger(__name__)


@dataclass
class AugmentConfig:
    enabled: bool = True
    flip: bool = True
    intensity: float = 0.1
    crop_min: float = 0.75


@dataclass
class DiffusionConfig:
    num_train_timesteps: int = 1000
    num_inference_steps: int = 25
    beta_start: float = 5e-3
    beta_end: float = 2e-2
    schedule: str = "scaled_linear"
    # SSIM dynamic range for the noise operand: about +-4 sigma of a unit normal
    noise_range: float = 8.0

    def schedule_obj(self) -> DiffusionSchedule:
        return DiffusionSchedule(
            self.num_train_timesteps, self.beta_start, self.beta_end, self.num_inference_steps, self.schedule
        )


@dataclass
class PretrainConfig:
    strategy: str = "reconstruction"
    epochs: int = 600
    lr_start: float = 5e-3
    lr_step_epoch: int = 300
    lr_gamma: float = 0.1
    weight_decay: float = 1e-4
    batch_size: int = 8
    contrastive_batch_size: int = 4
    adversarial_period: int = 1
    temperature: float = 0.5
    projection_dim: int = 64
    patch_size: tuple[int, int, int] = (64, 64, 63)
    diffusion_patch_size: tuple[int, int, int] = (32, 32, 32)
    patches_per_subject: int = 1
    ssim_window: int = 7
    # starting LR of the diffusion run when it should differ from lr_start
    diffusion_lr: float | None = None
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    seed: int = 0

    def validate(self) -> None:
        if self.strategy not in PRETRAIN_STRATEGIES:
            raise ConfigError(f"unknown pre-training strategy {self.strategy!r}")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.lr_start <= 0:
            raise ConfigError("lr_start must be positive")
        if self.adversarial_period < 1:
            raise ConfigError("adversarial_period must be >= 1")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        if self.diffusion_lr is not None and self.diffusion_lr <= 0:
            raise ConfigError("diffusion_lr must be positive")

    def with_epochs(self, epochs: int) -> "PretrainConfig":
        """Same schedule shape over ``epochs``: the LR step moves proportionally."""
        step = round(self.lr_step_epoch * epochs / self.epochs)
        return replace(self, epochs=epochs, lr_step_epoch=step)

    @property
    def effective_batch_size(self) -> int:
        return self.contrastive_batch_size if self.strategy == "contrastive" else self.batch_size

    @property
    def effective_lr(self) -> float:
        if self.strategy == "diffusion" and self.diffusion_lr is not None:
            return self.diffusion_lr
        return self.lr_start

    @property
    def effective_patch_size(self) -> tuple[int, int, int]:
        return self.diffusion_patch_size if self.strategy == "diffusion" else self.patch_size

    def ssim_params(self) -> SsimParams:
        return SsimParams(window=self.ssim_window)


def lr_at(epoch: int, cfg: PretrainConfig) -> float:
    """Single-step schedule: the starting LR before ``lr_step_epoch``, times ``lr_gamma`` from it on."""
    start = getattr(cfg, "effective_lr", cfg.lr_start)
    if epoch < cfg.lr_step_epoch:
        return start
    # snap to 12 significant digits so that 5e-3 * 0.1 is exactly 5e-4
    return float(f"{start * cfg.lr_gamma:.12g}")


# the generator/discriminator game oscillates with the default first-moment decay
ADVERSARIAL_BETAS = (0.5, 0.999)


def make_optimizer(params, cfg: PretrainConfig, lr: float | None = None) -> torch.optim.Adam:
    betas = ADVERSARIAL_BETAS if getattr(cfg, "strategy", None) == "adversarial" else (0.9, 0.999)
    return torch.optim.Adam(params, lr=cfg.lr_start if lr is None else lr, weight_decay=cfg.weight_decay, betas=betas)


def set_lr(optimizer: torch.optim.Optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr


def _record(**values: torch.Tensor | float) -> dict[str, float]:
    return {k: float(v.detach()) if isinstance(v, torch.Tensor) else float(v) for k, v in values.items()}


# -- single optimisation steps ------------------------------------------------------


def step_reconstruction(
    model: nn.Module, optimizer: torch.optim.Optimizer, batch: torch.Tensor, p: SsimParams = SsimParams()
) -> dict[str, float]:
    model.train()
    rec = loss_rec(model(batch), batch, p)
    optimizer.zero_grad(set_to_none=True)
    rec.backward()
    optimizer.step()
    return _record(total=rec, rec=rec)


def adversarial_schedule(epoch: int, period: int) -> tuple[bool, bool]:
    """``(generator_updates, discriminator_updates)`` for ``epoch`` with alternation period ``n``."""
    return epoch % period == 0, epoch % (period + 1) == 0


def step_adversarial(
    gen: nn.Module,
    disc: nn.Module,
    opt_gen: torch.optim.Optimizer,
    opt_disc: torch.optim.Optimizer,
    batch: torch.Tensor,
    epoch: int,
    cfg: PretrainConfig,
    p: SsimParams = SsimParams(),
) -> dict[str, float]:
    """Generator on ``loss_rec + gen_loss`` every ``n`` epochs; discriminator on ``disc_loss`` every ``n + 1``."""
    update_gen, update_disc = adversarial_schedule(epoch, cfg.adversarial_period)
    gen.train()
    disc.train()

    disc.requires_grad_(False)
    recon = gen(batch)
    rec = loss_rec(recon, batch, p)
    adv = gen_loss(disc(recon))
    total = rec + adv
    if update_gen:
        opt_gen.zero_grad(set_to_none=True)
        total.backward()
        opt_gen.step()
    disc.requires_grad_(True)

    fake = recon.detach()
    d = disc_loss(disc(fake), disc(batch))
    if update_disc:
        opt_disc.zero_grad(set_to_none=True)
        d.backward()
        opt_disc.step()
    return _record(total=total, rec=rec, gen=adv, disc=d, gen_updates=update_gen, disc_updates=update_disc)


class ProjectionHead(nn.Module):
    """Two-layer MLP mapping flattened encoder latents to the contrastive embedding space."""

    def __init__(self, in_dim: int, out_dim: int = 64):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(in_dim, in_dim), nn.BatchNorm1d(in_dim), nn.ReLU(), nn.Linear(in_dim, out_dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


@torch.no_grad()
def latent_dim(model: nn.Module, patch_size: Sequence[int]) -> int:
    """Width of the flattened deepest encoder state for a patch of ``patch_size``."""
    was_training = model.training
    model.eval()
    latent = model.forward_features(torch.zeros(1, 1, *patch_size))["latent"]
    model.train(was_training)
    return latent[0].numel()


def augment(batch: torch.Tensor, cfg: AugmentConfig, gen: torch.Generator) -> torch.Tensor:
    """Random axis flips, intensity scaling and crop-and-resize, drawn per sample."""
    if not cfg.enabled:
        return batch.clone()
    out = []
    size = batch.shape[-3:]
    for x in batch:
        if cfg.crop_min < 1.0:
            frac = cfg.crop_min + (1.0 - cfg.crop_min) * torch.rand(3, generator=gen)
            csize = [max(2, int(round(float(f) * s))) for f, s in zip(frac, size)]
            origin = [int(torch.randint(0, s - c + 1, (1,), generator=gen)) for s, c in zip(size, csize)]
            x = x[:, origin[0] : origin[0] + csize[0], origin[1] : origin[1] + csize[1], origin[2] : origin[2] + csize[2]]
            x = F.interpolate(x[None], size=tuple(size), mode="trilinear", align_corners=False)[0]
        if cfg.flip:
            flips = torch.rand(3, generator=gen) < 0.5
            dims = [i + 1 for i in range(3) if bool(flips[i])]
            if dims:
                x = torch.flip(x, dims)
        if cfg.intensity > 0:
            scale = 1.0 + cfg.intensity * (2 * float(torch.rand(1, generator=gen)) - 1)
            x = (x * scale).clamp(0.0, 1.0)
        out.append(x)
    return torch.stack(out)


def step_contrastive(
    model: nn.Module,
    head: nn.Module,
    optimizer: torch.optim.Optimizer,
    batch: torch.Tensor,
    cfg: PretrainConfig,
    gen: torch.Generator,
    p: SsimParams = SsimParams(),
) -> dict[str, float]:
    """One update on ``loss_rec`` of both views plus NT-Xent over projected, flattened encoder latents."""
    model.train()
    head.train()
    v1, v2 = augment(batch, cfg.augment, gen), augment(batch, cfg.augment, gen)
    views = torch.cat([v1, v2])
    out = model.forward_features(views)
    rec = loss_rec(out["recon"], views, p)
    emb = head(out["latent"].flatten(1))
    con = ntxent_loss(ContrastiveBatch(emb, cfg.temperature))
    total = rec + con
    optimizer.zero_grad(set_to_none=True)
    total.backward()
    optimizer.step()
    return _record(total=total, rec=rec, con=con)


def step_diffusion(
    model: nn.Module,
    optimizer: torch.optim.Optimizer,
    batch: torch.Tensor,
    sched: DiffusionSchedule,
    gen: torch.Generator,
    p: SsimParams = SsimParams(),
) -> dict[str, float]:
    """Noise ``batch`` (intensities in ``[0, 1]``) at uniform random ``t``; SSIM-form loss on the predicted noise."""
    model.train()
    x0 = to_model_range(batch)
    t = torch.randint(0, sched.num_train_timesteps, (x0.shape[0],), generator=gen)
    noise = torch.randn(x0.shape, generator=gen)
    x_t = forward_diffuse(x0, t, noise, sched)
    loss = loss_rec(model(x_t, t), noise, p)
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    return _record(total=loss, rec=loss)


# -- training history ----------------------------------------------------------------

HISTORY_HEAD = ("epoch", "lr", "loss_total")
HISTORY_TAIL = ("sec_epoch", "mem_frac", "power_frac")


@dataclass
class TrainingHistory:
    rows: list[dict[str, Any]] = field(default_factory=list)

    def append(self, row: dict[str, Any]) -> None:
        expected = self.rows[-1]["epoch"] + 1 if self.rows else 0
        if row["epoch"] != expected:
            raise ValueError(f"history rows must be contiguous: expected epoch {expected}, got {row['epoch']}")
        self.rows.append(row)

    def __len__(self) -> int:
        return len(self.rows)

    def column(self, name: str) -> list[Any]:
        return [r.get(name) for r in self.rows]

    @property
    def columns(self) -> list[str]:
        extra = []
        for r in self.rows:
            for k in r:
                if k not in HISTORY_HEAD and k not in HISTORY_TAIL and k not in extra:
                    extra.append(k)
        losses = sorted(k for k in extra if k.startswith("loss_"))
        others = [k for k in extra if not k.startswith("loss_")]
        return [*HISTORY_HEAD, *losses, *others, *HISTORY_TAIL]

    def to_csv(self, path: str | Path) -> Path:
        path = Path(path)
        cols = self.columns
        with path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(cols)
            for r in self.rows:
                writer.writerow([_fmt(r.get(c)) for c in cols])
        return path

    @classmethod
    def from_csv(cls, path: str | Path) -> "TrainingHistory":
        hist = cls()
        with Path(path).open(newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                parsed = {k: _parse(v) for k, v in row.items()}
                parsed["epoch"] = int(parsed["epoch"])
                hist.append(parsed)
        return hist


def _fmt(v: Any) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return "n/a"
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(v: str) -> Any:
    if v in ("", "n/a"):
        return None
    try:
        return int(v)
    except ValueError:
        pass
    try:
        return float(v)
    except ValueError:
        return v


# -- epoch loop ----------------------------------------------------------------------


def epoch_generators(seed: int, epoch: int) -> tuple[np.random.Generator, torch.Generator]:
    """Per-epoch RNG streams, so that a resumed run replays the exact same epoch."""
    s = derive_seed(seed, "epoch", epoch)
    return np.random.default_rng(s), torch.Generator().manual_seed(s)


@dataclass
class PretrainModels:
    encoder: EncoderDecoderConfig = field(default_factory=EncoderDecoderConfig)
    diffusion: DiffusionUNetConfig = field(default_factory=DiffusionUNetConfig)
    discriminator: DiscriminatorConfig = field(default_factory=DiscriminatorConfig)


class _Session:
    """Owns the networks and optimisers of one pre-training run."""

    def __init__(self, cfg: PretrainConfig, models: PretrainModels):
        self.cfg = cfg
        seed = derive_seed(cfg.seed, "init", cfg.strategy)
        if cfg.strategy == "diffusion":
            self.model = build_diffusion_unet(models.diffusion, seed)
        else:
            self.model = build_encoder_decoder(models.encoder, seed)
        self.aux: dict[str, nn.Module] = {}
        if cfg.strategy == "adversarial":
            self.aux["disc"] = build_discriminator(models.discriminator, derive_seed(cfg.seed, "init", "disc"))
        elif cfg.strategy == "contrastive":
            with torch.random.fork_rng(devices=[]):
                torch.manual_seed(derive_seed(cfg.seed, "init", "projection"))
                self.aux["proj"] = ProjectionHead(latent_dim(self.model, cfg.effective_patch_size), cfg.projection_dim)
        main_params = list(self.model.parameters())
        if cfg.strategy == "contrastive":
            main_params += list(self.aux["proj"].parameters())
        self.optimizers = {"main": make_optimizer(main_params, cfg)}
        if "disc" in self.aux:
            self.optimizers["disc"] = make_optimizer(self.aux["disc"].parameters(), cfg)
        self.sched = cfg.diffusion.schedule_obj()
        self.p = cfg.ssim_params()
        if cfg.strategy == "diffusion":
            self.p = SsimParams.for_range(cfg.diffusion.noise_range, cfg.ssim_window)

    def state(self) -> dict[str, Any]:
        return {
            "optimizers": {k: o.state_dict() for k, o in self.optimizers.items()},
            "aux": {k: m.state_dict() for k, m in self.aux.items()},
        }

    def load_state(self, state: dict[str, Any]) -> None:
        for k, o in self.optimizers.items():
            o.load_state_dict(state["optimizers"][k])
        for k, m in self.aux.items():
            m.load_state_dict(state["aux"][k])

    def step(self, batch: torch.Tensor, epoch: int, gen: torch.Generator) -> dict[str, float]:
        s = self.cfg.strategy
        if s == "reconstruction":
            return step_reconstruction(self.model, self.optimizers["main"], batch, self.p)
        if s == "adversarial":
            return step_adversarial(
                self.model, self.aux["disc"], self.optimizers["main"], self.optimizers["disc"], batch, epoch, self.cfg, self.p
            )
        if s == "contrastive":
            return step_contrastive(self.model, self.aux["proj"], self.optimizers["main"], batch, self.cfg, gen, self.p)
        return step_diffusion(self.model, self.optimizers["main"], batch, self.sched, gen, self.p)

    @torch.no_grad()
    def validate(self, subjects: Sequence) -> dict[str, float]:
        """Validation SSIM of reconstructions (or denoising loss for diffusion) on fixed patches."""
        if not subjects:
            return {}
        rng = np.random.default_rng(derive_seed(self.cfg.seed, "val"))
        gen = torch.Generator().manual_seed(derive_seed(self.cfg.seed, "val"))
        self.model.eval()
        values = []
        for batch in iter_batches(subjects, self.cfg.effective_patch_size, self.cfg.batch_size, rng):
            x = batch["image"]
            if self.cfg.strategy == "diffusion":
                x0 = to_model_range(x)
                t = torch.randint(0, self.sched.num_train_timesteps, (x.shape[0],), generator=gen)
                noise = torch.randn(x0.shape, generator=gen)
                values.append(float(loss_rec(self.model(forward_diffuse(x0, t, noise, self.sched), t), noise, self.p)))
            else:
                values.append(float(ssim(self.model(x), x, self.p)))
        key = "val_denoise_loss" if self.cfg.strategy == "diffusion" else "val_ssim"
        return {key: float(np.mean(values))}


def run_pretrain(
    cfg: PretrainConfig,
    data: CohortData,
    out_dir: str | Path,
    models: PretrainModels | None = None,
    stop_after: int | None = None,
) -> tuple[Path, TrainingHistory]:
    """Run (or resume) a pre-training job; returns ``(checkpoint_dir, history)``.

    Every epoch writes ``history.csv`` and overwrites ``checkpoint/``. If a
    checkpoint already exists the run resumes after its epoch. ``stop_after``
    halts once that many epochs are recorded, which simulates an interruption.
    """
    cfg.validate()
    models = models or PretrainModels()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_dir = out_dir / "checkpoint"
    history_path = out_dir / "history.csv"

    session = _Session(cfg, models)
    history = TrainingHistory()
    start = 0
    if (ckpt_dir / "manifest.json").exists():
        manifest = read_manifest(ckpt_dir)
        if manifest.get("pretrain_config") != _jsonable(asdict(cfg)):
            raise ConfigError(f"{ckpt_dir} was written with a different pre-training config")
        _, _, state = load_checkpoint(ckpt_dir, session.model, with_state=True)
        session.load_state(state)
        start = manifest["epoch"] + 1
        if history_path.exists():
            history = TrainingHistory(
                [r for r in TrainingHistory.from_csv(history_path).rows if r["epoch"] < start]
            )
        logger.info("resuming %s pre-training at epoch %d", cfg.strategy, start)

    for epoch in range(start, cfg.epochs):
        if stop_after is not None and len(history) >= stop_after:
            break
        lr = lr_at(epoch, cfg)
        for opt in session.optimizers.values():
            set_lr(opt, lr)
        rng, gen = epoch_generators(cfg.seed, epoch)

        def work() -> dict[str, float]:
            totals: dict[str, float] = {}
            n = 0
            for batch in iter_batches(
                data.train, cfg.effective_patch_size, cfg.effective_batch_size, rng, cfg.patches_per_subject,
                min_batch=2 if cfg.strategy == "contrastive" else 1,
            ):
                rec = session.step(batch["image"], epoch, gen)
                n += 1
                for k, v in rec.items():
                    totals[k] = totals.get(k, 0.0) + v
            return {k: (v if k.endswith("_updates") else v / max(n, 1)) for k, v in totals.items()}

        losses, profile = profile_epoch(work)
        row: dict[str, Any] = {"epoch": epoch, "lr": lr}
        for k, v in losses.items():
            row[k if k.endswith("_updates") else f"loss_{k}"] = int(v) if k.endswith("_updates") else v
        row.update(session.validate(data.val))
        row.update(sec_epoch=profile.seconds_per_epoch, mem_frac=profile.avg_mem_frac, power_frac=profile.avg_power_frac)
        row["peak_mem_frac"] = profile.peak_mem_frac
        history.append(row)
        save_checkpoint(
            ckpt_dir,
            session.model,
            seed=cfg.seed,
            epoch=epoch,
            state=session.state(),
            extra={
                "provenance": f"pretrain:{cfg.strategy}",
                "strategy": cfg.strategy,
                "pretrain_config": _jsonable(asdict(cfg)),
                "complete": epoch == cfg.epochs - 1,
                "loss_operand": "epsilon" if cfg.strategy == "diffusion" else "reconstruction",
            },
        )
        history.to_csv(history_path)
        logger.info("%s epoch %d lr=%.2e loss=%.4f", cfg.strategy, epoch, lr, row.get("loss_total", float("nan")))
    return ckpt_dir, history


def _jsonable(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj
