import math

import numpy as np
import pytest
import torch

from pretune.errors import DegenerateInputError
from pretune.losses import (
    ContrastiveBatch,
    MultiTaskWeights,
    SsimParams,
    contrastive_total,
    dice_loss,
    disc_loss,
    gen_loss,
    loss_rec,
    ms_ssim_metric,
    multitask_loss,
    ntxent_loss,
    one_hot_labels,
    ssim,
)

from . import oracles


def test_ssim_identity_and_symmetry(rng):
    x = torch.from_numpy(rng.random((8, 8, 8)))
    y = torch.from_numpy(rng.random((8, 8, 8)))
    assert float(ssim(x, x)) == pytest.approx(1.0, abs=1e-12)
    assert float(loss_rec(x, x)) == pytest.approx(0.0, abs=1e-12)
    assert float(ssim(x, y)) == pytest.approx(float(ssim(y, x)), abs=1e-12)


def test_ssim_constant_grids_closed_form():
    a, b = 0.2, 0.8
    x, y = torch.full((5, 5, 5), a, dtype=torch.float64), torch.full((5, 5, 5), b, dtype=torch.float64)
    p = SsimParams(window=5)
    c1, c2 = p.c1, p.c2
    expected = (2 * a * b + c1) * c2 / ((a * a + b * b + c1) * c2)
    assert float(ssim(x, y, p)) == pytest.approx(expected, abs=1e-9)


def test_loss_rec_anticorrelated_above_one():
    grid = torch.linspace(0, 1, 8, dtype=torch.float64)
    x = grid[:, None, None].expand(8, 8, 8).contiguous()
    value = float(loss_rec(x, 1.0 - x, SsimParams(window=7)))
    assert 1.0 < value <= 2.0


def test_ssim_shape_mismatch():
    with pytest.raises(ValueError):
        ssim(torch.zeros(4, 4, 4), torch.zeros(4, 4, 5))


def test_ssim_params_validation():
    with pytest.raises(ValueError):
        SsimParams(window=4)
    with pytest.raises(ValueError):
        SsimParams(c1=0.0)
    p = SsimParams.for_range(8.0)
    assert p.c1 == pytest.approx((0.08) ** 2) and p.c2 == pytest.approx((0.24) ** 2)


def test_disc_gen_limits():
    big = torch.full((4,), 50.0, dtype=torch.float64)
    assert float(disc_loss(-big, big)) < 1e-12
    assert float(gen_loss(big)) < 1e-12
    zero = torch.zeros(3, dtype=torch.float64)
    assert float(disc_loss(zero, zero)) == pytest.approx(math.log(2), abs=1e-12)
    assert float(gen_loss(zero)) == pytest.approx(math.log(2), abs=1e-12)
    with pytest.raises(ValueError):
        gen_loss(torch.zeros(0))


def test_ntxent_identical_embeddings_ln3():
    z = torch.ones(4, 5, dtype=torch.float64)
    assert float(ntxent_loss(ContrastiveBatch(z, 0.5))) == pytest.approx(math.log(3), abs=1e-12)


def test_ntxent_orthogonal_pairs_small_tau():
    e = torch.eye(4, dtype=torch.float64)
    z = torch.cat([e[:2], e[:2]])  # pairs identical, orthogonal to the other pair
    assert float(ntxent_loss(ContrastiveBatch(z, 0.01))) < 1e-30 + 1e-6


def test_ntxent_scale_invariance_and_custom_pairs(rng):
    z = torch.from_numpy(rng.standard_normal((6, 4)))
    base = float(ntxent_loss(ContrastiveBatch(z, 0.5)))
    assert float(ntxent_loss(ContrastiveBatch(3.7 * z, 0.5))) == pytest.approx(base, abs=1e-6)
    pairs = [1, 0, 3, 2, 5, 4]
    got = float(ntxent_loss(ContrastiveBatch(z, 0.5, torch.tensor(pairs))))
    assert got == pytest.approx(oracles.ntxent(z.numpy(), 0.5, pairs), abs=1e-6)


def test_ntxent_errors():
    with pytest.raises(DegenerateInputError):
        ntxent_loss(ContrastiveBatch(torch.zeros(4, 3), 0.5))
    with pytest.raises(ValueError):
        ContrastiveBatch(torch.ones(3, 3))
    with pytest.raises(ValueError):
        ContrastiveBatch(torch.ones(4, 3), pairs=torch.tensor([1, 0, 2, 3]))
    with pytest.raises(ValueError):
        ContrastiveBatch(torch.ones(4, 3), temperature=0.0)


def test_contrastive_total_additive(rng):
    x = torch.from_numpy(rng.random((6, 6, 6)))
    y = torch.from_numpy(rng.random((6, 6, 6)))
    batch = ContrastiveBatch(torch.from_numpy(rng.standard_normal((4, 5))), 0.5)
    terms = contrastive_total(x, y, SsimParams(), batch)
    expected = float(loss_rec(x, y)) + float(ntxent_loss(batch))
    assert float(terms.total) == pytest.approx(expected, abs=1e-8)
    assert set(terms.components) == {"rec", "con"}
    zero = contrastive_total(x, x, SsimParams(), ContrastiveBatch(torch.cat([torch.eye(4)[:2], torch.eye(4)[:2]]).double(), 0.001))
    assert float(zero.total) == pytest.approx(0.0, abs=1e-6)


def test_dice_loss_limits():
    target = torch.zeros(1, 4, 4, 4, dtype=torch.long)
    target[0, :2] = 1
    target[0, 3, 3] = 2
    perfect = one_hot_labels(target).double()
    assert float(dice_loss(perfect, target)) == pytest.approx(0.0, abs=1e-12)
    background = torch.zeros_like(perfect)
    background[:, 0] = 1
    assert float(dice_loss(background, target)) == pytest.approx(1.0, abs=1e-4)


def test_multitask_arithmetic():
    target = torch.zeros(1, 4, 4, 4, dtype=torch.long)
    target[0, 0] = 1
    target[0, 1, 1] = 2
    seg = one_hot_labels(target).double()
    cls_logits = torch.tensor([[-100.0, 100.0, -100.0]], dtype=torch.float64)
    terms = multitask_loss(seg, target, cls_logits, torch.tensor([1]))
    assert float(terms.total) == pytest.approx(0.0, abs=1e-12)
    w = MultiTaskWeights()
    assert (w.seg, w.cls) == (0.85, 0.15)
    assert w.seg * 0.4 + w.cls * 1.0 == pytest.approx(0.49, abs=1e-15)
    with pytest.raises(ValueError):
        MultiTaskWeights(-1.0, 0.5)


def test_ms_ssim(rng):
    x = rng.random((8, 8, 8))
    y = np.clip(x + 0.2 * rng.standard_normal((8, 8, 8)), 0, 1)
    tx, ty = torch.from_numpy(x), torch.from_numpy(y)
    assert float(ms_ssim_metric(tx, tx)) == pytest.approx(1.0, abs=1e-12)
    assert float(ms_ssim_metric(tx, ty, levels=1)) == pytest.approx(float(ssim(tx, ty)), abs=1e-8)
    for window in (3, 5):
        got = float(ms_ssim_metric(tx, ty, SsimParams(window=window), levels=3))
        assert got == pytest.approx(oracles.ms_ssim(x, y, 3, window), abs=1e-6)
    with pytest.raises(ValueError):
        ms_ssim_metric(tx, ty, levels=6)
