"""Acceptance criteria 1-11; the terminal summary prints one line per criterion.

Criterion 11 is an expected-trend report and never fails the run.
"""

from __future__ import annotations

import math
import time
from dataclasses import replace

import numpy as np
import pytest
import torch

from pretune.config import ExperimentConfig, desk_profile
from pretune.data import collate, derive_seed, subject_patch
from pretune.diffusion import DiffusionSchedule, forward_diffuse, sample_diffusion
from pretune.finetune import FinetuneConfig, frozen_digest, prepare_model, run_finetune, step_finetune
from pretune.lora import LoraLinear, adapter_parameter_count, inject_lora, lora_targets, merge_lora
from pretune.losses import (
    ContrastiveBatch,
    MultiTaskWeights,
    SsimParams,
    disc_loss,
    dice_loss,
    gen_loss,
    loss_rec,
    multitask_loss,
    ntxent_loss,
    ssim,
)
from pretune.metrics import dice_score, hausdorff_distance
from pretune.models import (
    HeadConfig,
    build_diffusion_unet,
    build_discriminator,
    build_encoder_decoder,
    parameter_inventory,
)
from pretune.models.checkpoint import load_checkpoint
from pretune.pretrain import (
    PretrainConfig,
    PretrainModels,
    ProjectionHead,
    latent_dim,
    lr_at,
    make_optimizer,
    run_pretrain,
    step_adversarial,
    step_contrastive,
    step_diffusion,
    step_reconstruction,
)
from pretune.report import COLUMNS, METRIC_COLUMNS, read_report
from pretune.runner import run_grid
from pretune.strategies import TuningStrategy
from pretune.volume import GeneratorSettings, generate_synthetic_subject

from . import oracles

N_CASES = 50


def _dims(rng, lo=3, hi=8):
    return tuple(int(v) for v in rng.integers(lo, hi + 1, size=3))


# -- 1. loss oracle suite ------------------------------------------------------------


@pytest.mark.criterion(1)
def test_loss_oracle_suite():
    rng = np.random.default_rng(101)
    start = time.perf_counter()
    for case in range(N_CASES):
        dims = _dims(rng)
        window = int(rng.choice([3, 5, 7]))
        x = rng.random(dims)
        y = np.clip(x + 0.3 * rng.standard_normal(dims), 0, 1) if case % 2 else rng.random(dims)
        p = SsimParams(window=window)
        tx, ty = torch.from_numpy(x), torch.from_numpy(y)
        ref = oracles.ssim(x, y, window)
        assert abs(float(ssim(tx, ty, p)) - ref) <= 1e-8
        assert abs(float(loss_rec(tx, ty, p)) - (1.0 - ref)) <= 1e-8

        fake = rng.normal(0, 3, size=int(rng.integers(1, 9)))
        real = rng.normal(0, 3, size=int(rng.integers(1, 9)))
        assert abs(float(disc_loss(torch.from_numpy(fake), torch.from_numpy(real))) - oracles.disc_loss(fake, real)) <= 1e-8
        assert abs(float(gen_loss(torch.from_numpy(fake))) - oracles.gen_loss(fake)) <= 1e-8

        n = int(rng.integers(2, 5))
        z = rng.standard_normal((2 * n, int(rng.integers(2, 9))))
        tau = float(rng.uniform(0.1, 1.0))
        got = float(ntxent_loss(ContrastiveBatch(torch.from_numpy(z), tau)))
        assert abs(got - oracles.ntxent(z, tau)) <= 1e-6

        batch = int(rng.integers(1, 3))
        grid = _dims(rng, 2, 6)
        logits = rng.standard_normal((batch, 3, *grid))
        probs = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
        target = rng.integers(0, 3, size=(batch, *grid))
        got = float(dice_loss(torch.from_numpy(probs), torch.from_numpy(target)))
        assert abs(got - oracles.dice_loss(probs, target)) <= 1e-8

        cls_logits = rng.standard_normal((batch, 3))
        cls_target = rng.integers(0, 3, size=batch)
        w = MultiTaskWeights()
        terms = multitask_loss(
            torch.from_numpy(probs), torch.from_numpy(target), torch.from_numpy(cls_logits), torch.from_numpy(cls_target), w
        )
        assert abs(float(terms.total) - oracles.multitask(probs, target, cls_logits, cls_target)) <= 1e-8
    assert time.perf_counter() - start < 60


# -- 2. gradient checks --------------------------------------------------------------


def _rel_err(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-30))


def _analytic(f, x: np.ndarray) -> np.ndarray:
    t = torch.from_numpy(x.copy()).requires_grad_(True)
    f(t).backward()
    return t.grad.numpy()


@pytest.mark.criterion(2)
def test_grad_loss_rec():
    rng = np.random.default_rng(202)
    y = torch.from_numpy(rng.random((6, 6, 6)))
    x = rng.random((6, 6, 6))
    p = SsimParams(window=3)
    f = lambda t: loss_rec(t, y, p)  # noqa: E731
    num = oracles.numeric_grad(lambda a: float(f(torch.from_numpy(a))), x.copy())
    assert _rel_err(_analytic(f, x), num) < 1e-4


@pytest.mark.criterion(2)
def test_grad_dice_loss():
    rng = np.random.default_rng(203)
    target = torch.from_numpy(rng.integers(0, 3, size=(1, 6, 6, 6)))
    x = rng.dirichlet(np.ones(3), size=(1, 6, 6, 6)).transpose(0, 4, 1, 2, 3).copy()
    f = lambda t: dice_loss(t, target)  # noqa: E731
    num = oracles.numeric_grad(lambda a: float(f(torch.from_numpy(a))), x.copy())
    assert _rel_err(_analytic(f, x), num) < 1e-4


@pytest.mark.criterion(2)
def test_grad_ntxent():
    rng = np.random.default_rng(204)
    x = rng.standard_normal((4, 6 * 6 * 6))
    f = lambda t: ntxent_loss(ContrastiveBatch(t, 0.5))  # noqa: E731
    num = oracles.numeric_grad(lambda a: float(f(torch.from_numpy(a))), x.copy())
    assert _rel_err(_analytic(f, x), num) < 1e-4


@pytest.mark.criterion(2)
def test_grad_multitask():
    rng = np.random.default_rng(205)
    target = torch.from_numpy(rng.integers(0, 3, size=(1, 6, 6, 6)))
    cls_target = torch.tensor([1])
    x = rng.dirichlet(np.ones(3), size=(1, 6, 6, 6)).transpose(0, 4, 1, 2, 3).copy()
    logits = rng.standard_normal((1, 3))

    def f_seg(t):
        return multitask_loss(t, target, torch.from_numpy(logits), cls_target).total

    def f_cls(t):
        return multitask_loss(torch.from_numpy(x), target, t, cls_target).total

    num = oracles.numeric_grad(lambda a: float(f_seg(torch.from_numpy(a))), x.copy())
    assert _rel_err(_analytic(f_seg, x), num) < 1e-4
    num = oracles.numeric_grad(lambda a: float(f_cls(torch.from_numpy(a))), logits.copy())
    assert _rel_err(_analytic(f_cls, logits), num) < 1e-4


# -- 3. paper-constant fidelity ------------------------------------------------------


@pytest.mark.criterion(3)
def test_paper_constants_in_default_digest():
    cfg = ExperimentConfig()
    d = cfg.to_dict()
    pre, ft, diff = d["pretrain"], d["finetune"], d["pretrain"]["diffusion"]
    assert pre["epochs"] == 600
    assert pre["lr_start"] == 5e-3
    assert pre["lr_step_epoch"] == 300
    assert lr_at(299, cfg.pretrain) == 5e-3 and lr_at(300, cfg.pretrain) == 5e-4
    assert pre["weight_decay"] == 1e-4
    assert diff["beta_start"] == 5e-3 and diff["beta_end"] == 2e-2
    assert diff["num_inference_steps"] == 25
    assert ft["weights"] == {"seg": 0.85, "cls": 0.15}
    assert d["tuning"]["top_fraction"] == 0.10
    assert d["data"]["split"] == [0.70, 0.20, 0.10]
    # the digest is a function of exactly this dictionary
    assert cfg.digest() == ExperimentConfig().digest()
    changed = ExperimentConfig()
    changed.pretrain.epochs = 599
    assert changed.digest() != cfg.digest()


# -- 4. diffusion schedule -----------------------------------------------------------


@pytest.mark.criterion(4)
def test_schedule_sqrt_beta_linear():
    s = DiffusionSchedule()
    root = np.sqrt(s.betas)
    assert abs(root[0] - math.sqrt(5e-3)) <= 1e-12
    assert abs(root[-1] - math.sqrt(2e-2)) <= 1e-12
    assert np.max(np.abs(np.diff(root, 2))) <= 1e-12
    assert np.all(np.diff(s.betas) > 0) and np.all(np.diff(s.alpha_bars) < 0)
    assert len(s.inference_timesteps()) == 25


@pytest.mark.criterion(4)
def test_closed_form_matches_iteration():
    sched = DiffusionSchedule(num_train_timesteps=100)
    gen = torch.Generator().manual_seed(4)
    x0 = torch.rand(2, 1, 6, 6, 6, dtype=torch.float64, generator=gen)
    betas = sched.betas
    for t in (0, 1, 17, 63, 99):
        # iterate x_s = sqrt(1 - beta_s) x_{s-1} + sqrt(beta_s) eps_s for s = 0..t
        x = x0.clone()
        eps = [torch.randn(x0.shape, dtype=torch.float64, generator=gen) for _ in range(t + 1)]
        for s in range(t + 1):
            x = math.sqrt(1.0 - betas[s]) * x + math.sqrt(betas[s]) * eps[s]
        # the same draw expressed as one standard normal: sum_s c_s eps_s with sum c_s^2 = 1 - alpha_bar_t
        coeff = [math.sqrt(betas[s]) * math.prod(math.sqrt(1.0 - betas[r]) for r in range(s + 1, t + 1)) for s in range(t + 1)]
        var = sum(c * c for c in coeff)
        combined = sum(c * e for c, e in zip(coeff, eps)) / math.sqrt(var)
        closed = forward_diffuse(x0, t, combined, sched)
        assert abs(var - (1.0 - sched.alpha_bars[t])) <= 1e-12
        assert float((closed - x).abs().max()) <= 1e-5


@pytest.mark.criterion(4)
def test_sampler_desk_model_32():
    desk = desk_profile()
    model = build_diffusion_unet(desk.models.diffusion, seed=0)
    start = time.perf_counter()
    out = sample_diffusion(model, desk.pretrain.diffusion.schedule_obj(), (32, 32, 32), seed=0)
    assert out.shape == (1, 1, 32, 32, 32)
    assert torch.isfinite(out).all()
    assert time.perf_counter() - start < 60


# -- 5. LoRA -------------------------------------------------------------------------


@pytest.mark.criterion(5)
def test_lora_identity_merge_counts():
    desk = desk_profile()
    torch.manual_seed(0)
    base = build_encoder_decoder(desk.models.encoder, seed=5)
    x = torch.rand(2, 1, 16, 16, 16)
    with torch.no_grad():
        before = base(x).clone()
    shapes = {p: (base.get_submodule(p).in_features, base.get_submodule(p).out_features) for p in lora_targets(base)}
    s = TuningStrategy("lora", lora_rank=4, lora_alpha=8.0)
    adapted = inject_lora(base, s)
    with torch.no_grad():
        assert float((adapted(x) - before).abs().max()) <= 1e-7
    assert adapter_parameter_count(adapted) == sum(4 * (i + o) for i, o in shapes.values())
    for path, (fan_in, fan_out) in shapes.items():
        m = adapted.get_submodule(path)
        assert isinstance(m, LoraLinear)
        assert m.lora_A.numel() + m.lora_B.numel() == 4 * (fan_in + fan_out)

    gen = torch.Generator().manual_seed(1)
    with torch.no_grad():
        for m in adapted.modules():
            if isinstance(m, LoraLinear):
                m.lora_B.copy_(0.1 * torch.randn(m.lora_B.shape, generator=gen))
        y_adapted = adapted(x).clone()
    merged = merge_lora(adapted)
    assert not any(isinstance(m, LoraLinear) for m in merged.modules())
    with torch.no_grad():
        assert float((merged(x) - y_adapted).abs().max()) <= 1e-5


@pytest.mark.criterion(5)
def test_lora_count_single_layer():
    layer = LoraLinear(torch.nn.Linear(32, 16), rank=4, alpha=4.0)
    assert layer.lora_A.numel() + layer.lora_B.numel() == 192


# -- 6. freeze soundness -------------------------------------------------------------


@pytest.mark.criterion(6)
@pytest.mark.parametrize("kind", ["top", "decoder", "lora"])
def test_freeze_soundness(kind, desk, small_data, desk_checkpoint, tmp_path):
    import json

    strategy = desk.tuning.strategy(kind)
    cfg = replace(desk.finetune, epochs=3, lr_step_epoch=2, seed=3)
    # independent view of what must stay fixed: the same preparation on a fresh load
    reference, trainable = prepare_model(load_checkpoint(desk_checkpoint)[0], strategy, cfg.heads, cfg.seed)
    frozen = set(parameter_inventory(reference).names) - trainable
    assert frozen
    digest_before = frozen_digest(reference, frozen)

    model, _, history = run_finetune(desk_checkpoint, strategy, cfg, small_data, tmp_path)
    assert len(history) == 3
    assert frozen_digest(model, frozen) == digest_before
    changed = [n for n, p in model.named_parameters() if n in trainable and not torch.equal(p, reference.get_parameter(n))]
    assert changed, "trainable parameters did not move"

    manifest = json.loads((tmp_path / "run.json").read_text())
    if kind == "top":
        frac, slack = manifest["budget_fraction"], manifest["largest_body_entry_fraction"]
        assert 0.10 <= frac <= 0.10 + slack


# -- 7. adversarial cadence ----------------------------------------------------------


@pytest.mark.criterion(7)
def test_adversarial_cadence(desk, small_data, tmp_path):
    cfg = replace(desk.pretrain, strategy="adversarial", epochs=6, lr_step_epoch=3, adversarial_period=1)
    models = PretrainModels(desk.models.encoder, desk.models.diffusion, desk.models.discriminator)
    _, history = run_pretrain(cfg, small_data, tmp_path, models)
    assert history.column("epoch") == list(range(6))
    gen_epochs = [r["epoch"] for r in history.rows if r["gen_updates"] > 0]
    disc_epochs = [r["epoch"] for r in history.rows if r["disc_updates"] > 0]
    assert gen_epochs == [0, 1, 2, 3, 4, 5]
    assert disc_epochs == [0, 2, 4]


# -- 8. convergence smoke tests ------------------------------------------------------

STEPS = 200


def _overfit_batch():
    subjects = [generate_synthetic_subject(i, GeneratorSettings(dims=(16, 16, 16))) for i in range(4)]
    return collate([subject_patch(s, (0, 0, 0), (16, 16, 16)) for s in subjects])


def _drop(values: list[float]) -> float:
    """Relative fall from the first step to the mean of the last ten."""
    return 1.0 - float(np.mean(values[-10:])) / values[0]


@pytest.fixture(scope="module")
def overfit_batch():
    return _overfit_batch()


@pytest.mark.slow
@pytest.mark.criterion(8)
@pytest.mark.parametrize("strategy", ["reconstruction", "adversarial", "contrastive", "diffusion", "full-tune"])
def test_convergence(strategy, overfit_batch, record_property):
    desk = desk_profile()
    x = overfit_batch["image"]
    cfg = replace(desk.pretrain, strategy=strategy if strategy != "full-tune" else "reconstruction")
    lr = cfg.effective_lr
    start = time.perf_counter()
    key = "total"
    if strategy == "reconstruction":
        m = build_encoder_decoder(desk.models.encoder, seed=0)
        opt = make_optimizer(m.parameters(), cfg, lr)
        step = lambda i: step_reconstruction(m, opt, x)  # noqa: E731
    elif strategy == "adversarial":
        m = build_encoder_decoder(desk.models.encoder, seed=0)
        d = build_discriminator(desk.models.discriminator, seed=1)
        og, od = make_optimizer(m.parameters(), cfg, lr), make_optimizer(d.parameters(), cfg, lr)
        step = lambda i: step_adversarial(m, d, og, od, x, i, cfg)  # noqa: E731
        key = "rec"  # the generator-side reconstruction term; the adversarial pair is a game, not a descent
    elif strategy == "contrastive":
        m = build_encoder_decoder(desk.models.encoder, seed=0)
        h = ProjectionHead(latent_dim(m, (16, 16, 16)), cfg.projection_dim)
        opt = make_optimizer(list(m.parameters()) + list(h.parameters()), cfg, lr)
        # one fixed pair of views: the overfitting target must not change between steps
        step = lambda i: step_contrastive(m, h, opt, x, cfg, torch.Generator().manual_seed(0))  # noqa: E731
    elif strategy == "diffusion":
        m = build_diffusion_unet(desk.models.diffusion, seed=0)
        opt = make_optimizer(m.parameters(), cfg, lr)
        sched, gen = cfg.diffusion.schedule_obj(), torch.Generator().manual_seed(0)
        p = SsimParams.for_range(cfg.diffusion.noise_range, cfg.ssim_window)
        step = lambda i: step_diffusion(m, opt, x, sched, gen, p)  # noqa: E731
    else:
        ft = desk.finetune
        m, _ = prepare_model(build_encoder_decoder(desk.models.encoder, seed=0), TuningStrategy("full"), HeadConfig(), 0)
        opt = make_optimizer([q for q in m.parameters() if q.requires_grad], ft)
        step = lambda i: step_finetune(m, opt, overfit_batch, ft.weights)  # noqa: E731
    values = [step(i)[key] for i in range(STEPS)]
    drop = _drop(values)
    record_property("acceptance_note", f"{strategy}: {key} loss {values[0]:.4f} -> {np.mean(values[-10:]):.4f} ({100 * drop:.1f}% drop, lr {lr:g}, {time.perf_counter() - start:.0f}s)")
    assert drop >= 0.5


# -- 9. metric oracles ---------------------------------------------------------------


@pytest.mark.criterion(9)
def test_metric_oracles():
    rng = np.random.default_rng(909)
    for _ in range(100):
        dims = _dims(rng, 2, 10)
        spacing = tuple(float(v) for v in rng.uniform(0.5, 2.0, size=3))
        density = rng.uniform(0.05, 0.5)
        pred = np.where(rng.random(dims) < density, rng.integers(1, 3, size=dims), 0)
        target = np.where(rng.random(dims) < density, rng.integers(1, 3, size=dims), 0)
        d = dice_score(pred, target)
        h = hausdorff_distance(pred, target, spacing)
        for lab in (1, 2):
            assert d[str(lab)] == oracles.dice_label(pred, target, lab)
            ref = oracles.hausdorff(pred == lab, target == lab, spacing)
            got = h[str(lab)]
            assert (math.isnan(ref) and math.isnan(got)) or got == ref
        assert hausdorff_distance(target, pred, spacing) == h or any(math.isnan(v) for v in h.values())


@pytest.mark.criterion(9)
def test_metric_edge_cases():
    rng = np.random.default_rng(910)
    mask = rng.integers(0, 3, size=(8, 8, 8))
    assert hausdorff_distance(mask, mask)["avg"] == 0.0
    a = np.zeros((10, 10, 10), dtype=int)
    b = np.zeros_like(a)
    a[2, 4, 4] = 1
    b[5, 4, 4] = 1
    assert hausdorff_distance(a, b, labels=(1,))["1"] == 3.0
    assert hausdorff_distance(a, b, spacing=(2.0, 1.0, 1.0), labels=(1,))["1"] == 6.0
    b[5, 4, 4], b[2, 8, 8] = 0, 1
    assert hausdorff_distance(a, b, spacing=(1.0, 0.5, 2.0), labels=(1,))["1"] == math.sqrt((4 * 0.5) ** 2 + (4 * 2.0) ** 2)


# -- 10. end-to-end grid -------------------------------------------------------------


@pytest.fixture(scope="module")
def desk_grids(tmp_path_factory):
    cfg = desk_profile()
    start = time.perf_counter()
    first = run_grid(cfg, tmp_path_factory.mktemp("grid_a"))
    second = run_grid(cfg, tmp_path_factory.mktemp("grid_b"))
    return first, second, time.perf_counter() - start


@pytest.mark.slow
@pytest.mark.criterion(10)
def test_grid_report(desk_grids, record_property):
    first, _, elapsed = desk_grids
    assert not first.failed
    rows = read_report(first.report["csv"])
    assert tuple(first.report["csv"].read_text().splitlines()[0].split(",")) == COLUMNS
    assert len(COLUMNS) == 12
    pre = [r for r in rows if r["tune_strategy"] == "none"]
    tuned = [r for r in rows if r["tune_strategy"] != "none"]
    assert len(pre) == 4 and len(tuned) == 20
    assert {(r["pretrain_strategy"], r["tune_strategy"]) for r in tuned} == {
        (p, t) for p in ("reconstruction", "adversarial", "contrastive", "diffusion") for t in ("top", "decoder", "full", "lora", "scratch")
    }
    for r in tuned:
        assert 0.0 <= r["dice_avg"] <= 1.0
        assert r["sec_per_epoch"] > 0
    record_property("acceptance_note", f"two desk grids (24 rows each) in {elapsed / 60:.1f} min")
    assert elapsed < 60 * 60


@pytest.mark.slow
@pytest.mark.criterion(10)
def test_grid_determinism(desk_grids):
    first, second, _ = desk_grids
    a = first.report["csv"].read_text().splitlines()
    b = second.report["csv"].read_text().splitlines()
    assert len(a) == len(b) == 25
    idx = [COLUMNS.index(c) for c in ("pretrain_strategy", "tune_strategy", "feature_size", *METRIC_COLUMNS)]
    for line_a, line_b in zip(a, b):
        cells_a, cells_b = line_a.split(","), line_b.split(",")
        assert [cells_a[i] for i in idx] == [cells_b[i] for i in idx]


# -- 11. expected trend (non-gating) -------------------------------------------------


TREND_SEEDS = range(10)


@pytest.mark.slow
@pytest.mark.criterion(11)
def test_scratch_trend(tmp_path, record_property):
    """Scratch vs best fine-tuned dice over 10 seeds; reported, never asserted."""
    wins, lines = 0, []
    for seed in TREND_SEEDS:
        cfg = desk_profile()
        cfg.seed = seed
        cfg.grid = replace(cfg.grid, pretrain=("reconstruction",), linear_probe=False)
        result = run_grid(cfg, tmp_path / f"seed{seed}")
        rows = read_report(result.report["csv"])
        scratch = next(r["dice_avg"] for r in rows if r["tune_strategy"] == "scratch")
        tuned = max(r["dice_avg"] for r in rows if r["tune_strategy"] not in ("none", "scratch"))
        wins += scratch <= tuned
        lines.append(f"seed {seed}: scratch {scratch:.4f} vs best tuned {tuned:.4f}")
    verdict = "holds" if wins >= 7 else "does not hold"
    record_property("acceptance_note", f"scratch <= best fine-tuned in {wins}/10 seeds (trend {verdict}; needs 7)")
    for line in lines:
        record_property("acceptance_note", line)
