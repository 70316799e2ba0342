import json
import math
from dataclasses import replace

import pytest
import torch

from pretune.errors import ConfigError
from pretune.finetune import FinetuneConfig, run_finetune
from pretune.losses import ContrastiveBatch, disc_loss, ntxent_loss
from pretune.models import build_discriminator, build_encoder_decoder
from pretune.models.checkpoint import load_checkpoint
from pretune.pretrain import (
    PretrainConfig,
    PretrainModels,
    TrainingHistory,
    lr_at,
    make_optimizer,
    run_pretrain,
    step_adversarial,
    step_reconstruction,
)
from pretune.strategies import TuningStrategy


def _models(desk):
    return PretrainModels(desk.models.encoder, desk.models.diffusion, desk.models.discriminator)


def _batch(n=2, size=16, seed=0):
    return torch.rand(n, 1, size, size, size, generator=torch.Generator().manual_seed(seed))


def test_lr_schedule_values():
    cfg = PretrainConfig()
    assert [lr_at(e, cfg) for e in (0, 299, 300, 599)] == [5e-3, 5e-3, 5e-4, 5e-4]
    short = cfg.with_epochs(6)
    assert short.lr_step_epoch == 3
    diff = replace(cfg, strategy="diffusion", diffusion_lr=1e-3)
    assert lr_at(0, diff) == 1e-3 and lr_at(300, diff) == 1e-4
    with pytest.raises(ConfigError):
        replace(cfg, strategy="jigsaw").validate()


def test_zero_lr_step_leaves_weights(desk):
    m = build_encoder_decoder(desk.models.encoder, seed=0)
    before = [p.detach().clone() for p in m.parameters()]
    step_reconstruction(m, make_optimizer(m.parameters(), desk.pretrain, lr=0.0), _batch())
    assert all(torch.equal(a, b) for a, b in zip(before, m.parameters()))


def test_generator_only_epoch_keeps_discriminator(desk):
    cfg = replace(desk.pretrain, strategy="adversarial", adversarial_period=2)
    gen = build_encoder_decoder(desk.models.encoder, seed=0)
    disc = build_discriminator(desk.models.discriminator, seed=1)
    og, od = make_optimizer(gen.parameters(), cfg), make_optimizer(disc.parameters(), cfg)
    d_before = [p.detach().clone() for p in disc.parameters()]
    g_before = [p.detach().clone() for p in gen.parameters()]
    rec = step_adversarial(gen, disc, og, od, _batch(), 2, cfg)  # 2 % 2 == 0, 2 % 3 != 0
    assert (rec["gen_updates"], rec["disc_updates"]) == (1.0, 0.0)
    assert all(torch.equal(a, b) for a, b in zip(d_before, disc.parameters()))
    assert not all(torch.equal(a, b) for a, b in zip(g_before, gen.parameters()))


def test_disc_loss_falls_on_separable_batch(desk):
    disc = build_discriminator(desk.models.discriminator, seed=0)
    opt = make_optimizer(disc.parameters(), replace(desk.pretrain, strategy="adversarial"), lr=1e-3)
    real, fake = torch.ones(4, 1, 16, 16, 16), torch.zeros(4, 1, 16, 16, 16)
    values = []
    for _ in range(20):
        loss = disc_loss(disc(fake), disc(real))
        opt.zero_grad()
        loss.backward()
        opt.step()
        values.append(float(loss.detach()))
    assert values[-1] < 0.5 * values[0]


def test_collapsed_embeddings_give_log_2n_minus_1():
    n = 5
    z = torch.ones(2 * n, 7, dtype=torch.float64)
    assert float(ntxent_loss(ContrastiveBatch(z, 0.1))) == pytest.approx(math.log(2 * n - 1), abs=1e-12)


def test_run_pretrain_history_and_checkpoint(tmp_path, desk, small_data):
    cfg = replace(desk.pretrain, epochs=3, lr_step_epoch=2)
    ckpt, history = run_pretrain(cfg, small_data, tmp_path, _models(desk))
    assert history.column("epoch") == [0, 1, 2]
    assert history.column("lr") == [lr_at(e, cfg) for e in range(3)]
    assert all(math.isfinite(v) for v in history.column("loss_total"))
    assert history.columns[:3] == ["epoch", "lr", "loss_total"]
    on_disk = TrainingHistory.from_csv(tmp_path / "history.csv")
    assert on_disk.column("epoch") == [0, 1, 2]
    _, manifest, state = load_checkpoint(ckpt, with_state=True)
    assert manifest["complete"] and manifest["epoch"] == 2 and state is not None


@pytest.mark.parametrize("strategy", ["reconstruction", "contrastive"])
def test_pretrain_resume_matches_uninterrupted(tmp_path, desk, small_data, strategy):
    cfg = replace(desk.pretrain, strategy=strategy, epochs=3, lr_step_epoch=2)
    straight, h1 = run_pretrain(cfg, small_data, tmp_path / "a", _models(desk))
    run_pretrain(cfg, small_data, tmp_path / "b", _models(desk), stop_after=1)
    resumed, h2 = run_pretrain(cfg, small_data, tmp_path / "b", _models(desk))
    assert h2.column("epoch") == [0, 1, 2]
    assert h1.column("loss_total") == h2.column("loss_total")
    a, b = load_checkpoint(straight)[0], load_checkpoint(resumed)[0]
    assert all(torch.equal(x, y) for x, y in zip(a.state_dict().values(), b.state_dict().values()))
    with pytest.raises(ConfigError):
        run_pretrain(replace(cfg, temperature=0.2), small_data, tmp_path / "b", _models(desk))


def _ft(desk, epochs=2):
    return replace(desk.finetune, epochs=epochs, lr_step_epoch=1)


def test_scratch_provenance_and_checkpoint_rules(tmp_path, desk, small_data, desk_checkpoint):
    _, report, history = run_finetune(
        None, TuningStrategy("scratch"), _ft(desk, 1), small_data, tmp_path / "s", base_cfg=desk.models.encoder
    )
    manifest = json.loads((tmp_path / "s" / "run.json").read_text())
    assert manifest["provenance"] == "scratch" and manifest["checkpoint"] is None
    assert manifest["complete"] and manifest["frozen_verified"]
    assert set(report.dice) == {"1", "2", "avg"}
    with pytest.raises(ConfigError):
        run_finetune(desk_checkpoint, TuningStrategy("scratch"), _ft(desk), small_data, tmp_path / "x", base_cfg=desk.models.encoder)
    with pytest.raises(ConfigError):
        run_finetune(None, TuningStrategy("top"), _ft(desk), small_data, tmp_path / "y")
    with pytest.raises(ConfigError):
        run_finetune(None, TuningStrategy("scratch"), _ft(desk), small_data, tmp_path / "z")


def test_finetune_resume_matches_uninterrupted(tmp_path, desk, small_data, desk_checkpoint):
    s = TuningStrategy("decoder")
    _, r1, h1 = run_finetune(desk_checkpoint, s, _ft(desk), small_data, tmp_path / "a")
    run_finetune(desk_checkpoint, s, _ft(desk), small_data, tmp_path / "b", stop_after=1)
    manifest = json.loads((tmp_path / "b" / "run.json").read_text())
    assert manifest["complete"] is False
    _, r2, h2 = run_finetune(desk_checkpoint, s, _ft(desk), small_data, tmp_path / "b")
    assert h2.column("epoch") == [0, 1]
    assert h1.column("loss_total") == h2.column("loss_total")
    assert r1.dice == r2.dice
    with pytest.raises(ConfigError):
        run_finetune(desk_checkpoint, TuningStrategy("top"), _ft(desk), small_data, tmp_path / "b")


def test_finetune_config_validation():
    with pytest.raises(ConfigError):
        FinetuneConfig(epochs=0).validate()
    with pytest.raises(ConfigError):
        FinetuneConfig(batch_size=0).validate()
