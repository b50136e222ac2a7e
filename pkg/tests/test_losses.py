import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from organseg.losses import (
    LossWeights,
    batch_dice_loss,
    dice_gradient_reference,
    dice_value,
    frequency_table,
    hybrid_loss,
    participation_frequency,
    region_ce_loss,
    sb_focal_loss,
)
from organseg.network import recalibrate


def random_simplex(rng, shape, dtype=torch.float64):
    logits = torch.as_tensor(rng.normal(size=shape), dtype=dtype)
    return torch.softmax(logits, dim=1)


def random_onehot(rng, B, C, H, W, dtype=torch.float64):
    labels = rng.integers(0, C, size=(B, H, W))
    return torch.as_tensor(np.moveaxis(np.eye(C)[labels], -1, 1), dtype=dtype)


def central_diff(f, x, h=1e-6):
    x = x.detach().clone()
    grad = torch.zeros_like(x)
    flat, gflat = x.view(-1), grad.view(-1)
    for i in range(flat.numel()):
        old = flat[i].item()
        flat[i] = old + h
        fp = f(x).item()
        flat[i] = old - h
        fm = f(x).item()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def autograd(f, x):
    x = x.detach().clone().requires_grad_(True)
    f(x).backward()
    return x.grad


def rel_err(a, b):
    return float((a - b).norm() / max(b.norm(), 1e-12))


# -- batch dice ---------------------------------------------------------------

def test_batch_dice_perfect_and_total_miss():
    g = torch.zeros(2, 3, 2, 2, dtype=torch.float64)
    g[:, 0, 0, :] = 1
    g[:, 1, 1, 0] = 1
    g[:, 2] = 1 - g[:, :2].sum(1)
    assert batch_dice_loss(g, g, smooth=0.0).item() == 0.0
    # every organ voxel predicted background, every background voxel predicted organ 0
    p = torch.zeros_like(g)
    p[:, 2] = g[:, 0] + g[:, 1]
    p[:, 0] = g[:, 2]
    assert batch_dice_loss(p, g, smooth=0.0).item() == 1.0


def test_batch_dice_hand_value():
    # B=2, one organ + background, 2x2 maps
    p0 = torch.tensor([[0.9, 0.2], [0.4, 0.0]], dtype=torch.float64)
    p1 = torch.tensor([[0.1, 0.7], [0.5, 0.3]], dtype=torch.float64)
    g0 = torch.tensor([[1, 0], [1, 0]], dtype=torch.float64)
    g1 = torch.tensor([[0, 1], [0, 0]], dtype=torch.float64)
    p = torch.stack([torch.stack([p0, 1 - p0]), torch.stack([p1, 1 - p1])])
    g = torch.stack([torch.stack([g0, 1 - g0]), torch.stack([g1, 1 - g1])])
    inter = 0.9 + 0.4 + 0.7
    psum = 0.9 + 0.2 + 0.4 + 0.1 + 0.7 + 0.5 + 0.3
    gsum = 3.0
    for smooth in (0.0, 1.0):
        expected = 1 - (2 * inter + smooth) / (psum + gsum + smooth)
        assert batch_dice_loss(p, g, smooth=smooth).item() == pytest.approx(expected, abs=1e-15)


def test_batch_dice_skips_absent_classes():
    rng = np.random.default_rng(0)
    p = random_simplex(rng, (2, 4, 4, 4))
    g = torch.zeros_like(p)
    g[:, 3] = 1
    g[0, 3, 0, 0], g[0, 1, 0, 0] = 0, 1
    only = 1 - (2 * p[0, 1, 0, 0] + 1) / (p[:, 1].sum() + 1 + 1)
    assert batch_dice_loss(p, g).item() == pytest.approx(only.item())
    g[0, 1, 0, 0], g[0, 3, 0, 0] = 0, 1
    with pytest.warns(UserWarning):
        assert batch_dice_loss(p, g).item() == 0.0


def test_batch_dice_availability_restricts_samples():
    rng = np.random.default_rng(1)
    p = random_simplex(rng, (2, 3, 4, 4))
    g = random_onehot(rng, 2, 3, 4, 4)
    avail = torch.tensor([[1.0, 1.0], [1.0, 0.0]], dtype=torch.float64)
    whole = batch_dice_loss(p, g, avail, smooth=0.0)
    inter0 = (p[:, 0] * g[:, 0]).sum()
    d0 = 2 * inter0 / (p[:, 0].sum() + g[:, 0].sum())
    d1 = 2 * (p[0, 1] * g[0, 1]).sum() / (p[0, 1].sum() + g[0, 1].sum())
    assert whole.item() == pytest.approx(1 - (d0 + d1).item() / 2)


# -- sb focal -------------------------------------------------------------------

def test_sb_focal_perfect_prediction():
    rng = np.random.default_rng(2)
    g = random_onehot(rng, 2, 4, 5, 5)
    assert sb_focal_loss(g.clone(), g).item() == 0.0


def test_sb_focal_single_voxel():
    g = torch.zeros(1, 2, 4, 4, dtype=torch.float64)
    g[0, 1] = 1
    g[0, 1, 2, 2], g[0, 0, 2, 2] = 0, 1
    p = g.clone()
    p[0, 0, 2, 2] = p[0, 1, 2, 2] = 0.5
    expected = (1 / 16) * 0.25 * -math.log(0.5)
    assert expected == pytest.approx(0.01083, abs=5e-6)
    assert sb_focal_loss(p, g).item() == pytest.approx(expected, rel=1e-12)


def _focal_case(organ_voxels, q, H=11, W=11):
    """Two organs with the given voxel counts; organ voxels get probability q,
    the rest of their mass goes to background, background voxels are exact."""
    g = torch.zeros(1, 3, H, W, dtype=torch.float64)
    for c, n in enumerate(organ_voxels):
        g[0, c].view(-1)[c * 40:c * 40 + n] = 1
    g[0, 2] = 1 - g[0, 0] - g[0, 1]
    p = g.clone()
    p[0, :2] *= q
    p[0, 2] = 1 - p[0, 0] - p[0, 1]
    return p, g


def test_sb_focal_volume_cancellation():
    q, V = 0.7, 3
    p, g = _focal_case((V, 10 * V), q)
    term = (1 - q) ** 2 * -math.log(q) / (11 * 11)
    # each organ contributes the same amount regardless of its volume
    assert sb_focal_loss(p, g).item() == pytest.approx(2 * term, rel=1e-12)
    p1, g1 = _focal_case((V, 0), q)
    assert sb_focal_loss(p1, g1).item() == pytest.approx(term, rel=1e-12)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), k=st.integers(1, 6))
def test_sb_focal_volume_scaling_property(seed, k):
    rng = np.random.default_rng(seed)
    q = float(rng.uniform(0.05, 0.95))
    H = W = 8
    g = torch.zeros(1, 2, H, W, dtype=torch.float64)
    g[0, 0].view(-1)[:k] = 1
    g[0, 1] = 1 - g[0, 0]
    p = g.clone()
    p[0, 0][g[0, 0] == 1] = q
    p[0, 1] = 1 - p[0, 0]
    # background is imperfect only where organ voxels sit; isolate organ term
    organ_only = sb_focal_loss(p[:, :1].expand(1, 1, H, W), g[:, :1])
    assert organ_only.item() == pytest.approx((1 - q) ** 2 * -math.log(q) / (H * W), rel=1e-12)


def test_sb_focal_clamps_zero_probabilities():
    g = torch.zeros(1, 2, 2, 2, dtype=torch.float64)
    g[0, 1] = 1
    p = g.clone()
    p[0, 0, 0, 0], p[0, 1, 0, 0] = 1.0, 0.0
    v = sb_focal_loss(p, g)
    assert math.isfinite(v.item()) and v.item() > 0


# -- cross entropy -------------------------------------------------------------

def test_region_ce():
    logits = torch.zeros(3, 5, dtype=torch.float64)
    logits[torch.arange(3), [0, 2, 4]] = 20.0
    # margin 20 leaves ~4 * exp(-20) = 8.2e-9 of probability on the other classes
    assert region_ce_loss(logits, [0, 2, 4]).item() < 1e-8
    assert region_ce_loss(torch.zeros(2, 5, dtype=torch.float64), [1, 3]).item() == pytest.approx(math.log(5))
    a = torch.tensor([[1.0, 2.0, 0.5]], dtype=torch.float64)
    b = torch.tensor([[0.2, -1.0, 3.0]], dtype=torch.float64)
    la = region_ce_loss(a, [0]).item()
    lb = region_ce_loss(b, [1]).item()
    assert region_ce_loss(torch.cat([a, b]), [0, 1]).item() == pytest.approx((la + lb) / 2)
    with pytest.raises(ValueError):
        region_ce_loss(a, [3])


def test_region_ce_margin_20():
    logits = torch.tensor([[20.0, 0, 0, 0, 0]], dtype=torch.float64)
    assert region_ce_loss(logits, [0]).item() == pytest.approx(math.log1p(4 * math.exp(-20)), rel=1e-9)


# -- hybrid ---------------------------------------------------------------------

@pytest.mark.parametrize("w", [(1, 0, 0), (1, 1, 1), (0, 0, 1), (0.3, 2.0, 0.7)])
def test_hybrid_weights(w):
    rng = np.random.default_rng(3)
    p = random_simplex(rng, (2, 4, 6, 6))
    g = random_onehot(rng, 2, 4, 6, 6)
    logits = torch.as_tensor(rng.normal(size=(2, 5)))
    out = hybrid_loss(p, g, None, logits, [1, 4], LossWeights(*w))
    expect = w[0] * out.batch_dice + w[1] * out.sb_focal + w[2] * out.region_ce
    assert abs(out.total.item() - expect.item()) <= 1e-9
    if w == (1, 0, 0):
        assert out.total.item() == out.batch_dice.item()
    if w == (0, 0, 1):
        assert out.total.item() == out.region_ce.item()


def test_loss_weights_validation():
    with pytest.raises(ValueError):
        LossWeights(-1, 0, 0)
    assert LossWeights(0, 0, 0).all_zero


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 100_000))
def test_losses_nonnegative_and_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    p = random_simplex(rng, (4, 5, 6, 6))
    g = random_onehot(rng, 4, 5, 6, 6)
    perm = torch.as_tensor(rng.permutation(4))
    bd, sf = batch_dice_loss(p, g), sb_focal_loss(p, g)
    assert bd.item() >= 0 and sf.item() >= 0
    assert region_ce_loss(torch.as_tensor(rng.normal(size=(4, 5))), rng.integers(0, 5, 4)).item() >= 0
    assert batch_dice_loss(p[perm], g[perm]).item() == pytest.approx(bd.item(), rel=1e-12)
    assert sb_focal_loss(p[perm], g[perm]).item() == pytest.approx(sf.item(), rel=1e-12)


# -- dice gradient reference ----------------------------------------------------

def test_dice_gradient_at_perfect_prediction():
    g = np.array([1, 1, 1, 1, 0, 0, 0, 0, 0, 0], dtype=float)
    grad = dice_gradient_reference(g, g)
    np.testing.assert_allclose(grad[:4], 0.125, rtol=0, atol=1e-15)
    np.testing.assert_allclose(grad[4:], -0.125, rtol=0, atol=1e-15)
    with pytest.raises(ZeroDivisionError):
        dice_gradient_reference(np.zeros(4), np.zeros(4))


def test_dice_gradient_matches_fd_and_autograd():
    rng = np.random.default_rng(4)
    for _ in range(5):
        p = rng.uniform(0.01, 0.99, 64)
        g = (rng.uniform(size=64) < 0.3).astype(float)
        ref = torch.as_tensor(dice_gradient_reference(p, g))
        gt = torch.as_tensor(g)
        f = lambda x: dice_value(x, gt)  # noqa: E731
        fd = central_diff(f, torch.as_tensor(p))
        ad = autograd(f, torch.as_tensor(p))
        assert rel_err(ref, fd) < 1e-6
        assert rel_err(ref, ad) < 1e-6


@pytest.mark.parametrize("name", ["batch_dice", "sb_focal", "region_ce"])
def test_loss_gradients_match_finite_differences(name):
    rng = np.random.default_rng(5)
    B, C, H, W = 2, 4, 8, 8
    g = random_onehot(rng, B, C, H, W)
    avail = torch.tensor([[1.0, 1.0, 1.0], [1.0, 0.0, 1.0]], dtype=torch.float64)
    if name == "region_ce":
        x0 = torch.as_tensor(rng.normal(size=(B, 5)))
        f = lambda x: region_ce_loss(x, [1, 3])  # noqa: E731
    else:
        # differentiate through softmax + recalibration from the logits
        x0 = torch.as_tensor(rng.normal(size=(B, C, H, W)))
        loss = batch_dice_loss if name == "batch_dice" else sb_focal_loss
        if name == "batch_dice":
            f = lambda x: loss(recalibrate(torch.softmax(x, 1), avail), g, avail)  # noqa: E731
        else:
            f = lambda x: loss(recalibrate(torch.softmax(x, 1), avail), g)  # noqa: E731
    assert rel_err(autograd(f, x0), central_diff(f, x0)) < 1e-4


# -- participation frequency ------------------------------------------------------

def test_participation_frequency_values():
    assert round(participation_frequency(3094, 19113, 1), 4) == 0.1619
    assert round(participation_frequency(85, 19113, 1), 4) == 0.0044
    assert participation_frequency(3094, 19113, 16) == 1.0
    assert round(participation_frequency(85, 19113, 16), 4) == 0.0712
    r16 = participation_frequency(3094, 19113, 16) / participation_frequency(85, 19113, 16)
    r1 = participation_frequency(3094, 19113, 1) / participation_frequency(85, 19113, 1)
    assert round(r16, 2) == 14.05
    assert round(r1, 1) == 36.4
    with pytest.raises(ValueError):
        participation_frequency(1, 0, 16)
    with pytest.raises(ValueError):
        participation_frequency(5, 4, 16)


def test_frequency_table():
    t = frequency_table({"lung_r": 3094, "hypophysis": 85}, 19113, 16)
    assert t["organs"]["lung_r"]["freq_b16"] == 1.0
    assert round(t["ratio"]["ratio_b16"], 2) == 14.05
    assert round(t["ratio"]["ratio_b1"], 1) == 36.4
