import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from robox import numerics as nx
from robox.geometry import Box
from robox.numerics import Tensor
from robox.training.losses import DICE_EPS, loss_ce, loss_dice, loss_offsets, loss_points, mask_losses


def ce_oracle(logits, gt):
    tot = 0.0
    for z, y in zip(logits.ravel(), gt.ravel()):
        p = 1.0 / (1.0 + math.exp(-z))
        tot += -(y * math.log(p) + (1 - y) * math.log(1 - p))
    return tot / logits.size


def dice_loss_oracle(logits, gt):
    p = [1.0 / (1.0 + math.exp(-z)) for z in logits.ravel()]
    g = gt.ravel().tolist()
    inter = sum(a * b for a, b in zip(p, g))
    return 1.0 - (2 * inter + DICE_EPS) / (sum(p) + sum(g) + DICE_EPS)


def test_ce_dice_perfect_and_zero_logits():
    gt = np.zeros((8, 8))
    gt[2:5, 3:7] = 1
    perfect = np.where(gt > 0, 30.0, -30.0)
    assert loss_ce(perfect, gt).item() < 1e-12
    assert loss_dice(perfect, gt).item() < 1e-12
    assert abs(loss_ce(np.zeros((8, 8)), gt).item() - math.log(2)) < 1e-15


def test_ce_dice_match_summation_oracle():
    rng = np.random.default_rng(0)
    for _ in range(20):
        z = rng.normal(size=(6, 7)) * 3
        g = (rng.random((6, 7)) < 0.4).astype(float)
        assert abs(loss_ce(z, g).item() - ce_oracle(z, g)) < 1e-9
        assert abs(loss_dice(z, g).item() - dice_loss_oracle(z, g)) < 1e-9


def test_mask_losses_batched_agree():
    rng = np.random.default_rng(1)
    z = rng.normal(size=(2, 3, 5, 5))
    g = rng.random((2, 5, 5)) < 0.5
    ce, dl = mask_losses(Tensor(z), g)
    for b in range(2):
        for k in range(3):
            assert abs(ce.data[b, k] - ce_oracle(z[b, k], g[b].astype(float))) < 1e-12
            assert abs(dl.data[b, k] - dice_loss_oracle(z[b, k], g[b].astype(float))) < 1e-12


def test_shape_mismatch_rejected():
    with pytest.raises(nx.ShapeError):
        loss_ce(np.zeros((4, 4)), np.zeros((4, 5)))
    with pytest.raises(nx.ShapeError):
        loss_dice(np.zeros((4, 4)), np.zeros((5, 4)))


def test_offset_loss_examples():
    a = Box(10, 12, 30, 40)
    assert loss_offsets(a, a).item() == 0.0
    b = Box(16.4, 12, 30, 40)
    assert abs(loss_offsets(b, a, 64).item() - 0.025) < 1e-12
    assert loss_offsets(a, b).item() == loss_offsets(b, a).item()


def test_point_loss_examples():
    rng = np.random.default_rng(2)
    gt = rng.uniform(0, 64, size=(5, 2))
    assert loss_points(gt[rng.permutation(5)], gt, False).item() < 1e-5
    shifted = gt + np.array([6.4, 0.0])
    # spread the targets so the identity matching is optimal
    gt2 = np.array([[0, 0], [20, 0], [40, 0], [0, 30], [40, 40]], float)
    assert abs(loss_points(gt2 + [6.4, 0.0], gt2, False, 64).item() - 0.1) < 1e-9
    a = loss_points(shifted, gt, False).item()
    b = loss_points(shifted, gt[::-1], False).item()
    assert abs(a - b) < 1e-12


def test_point_loss_skip_rows():
    pred = np.zeros((2, 5, 2))
    gt = np.ones((2, 5, 2)) * 6.4
    both = loss_points(pred, gt, [True, True]).item()
    assert both == 0.0
    one = loss_points(pred, gt, [False, True]).item()
    only = loss_points(pred[:1], gt[:1], [False]).item()
    assert one == only


def test_point_loss_reduction_options():
    gt = np.array([[0, 0], [20, 0], [40, 0], [0, 30], [40, 40]], float)
    pred = gt + [3.2, 0.0]
    mean = loss_points(pred, gt, False, 64).item()
    total = loss_points(pred, gt, False, 64, reduction="sum").item()
    sq = loss_points(pred, gt, False, 64, squared=True).item()
    assert abs(total - 5 * mean) < 1e-12
    assert abs(sq - 0.05 ** 2) < 1e-12


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6))
def test_losses_nonnegative(seed):
    rng = np.random.default_rng(seed)
    z = rng.normal(size=(4, 4)) * 5
    g = (rng.random((4, 4)) < 0.5).astype(float)
    assert loss_ce(z, g).item() >= 0 and loss_dice(z, g).item() >= 0
    assert loss_offsets(rng.uniform(0, 64, 4), rng.uniform(0, 64, 4)).item() >= 0
    assert loss_points(rng.uniform(0, 64, (5, 2)), rng.uniform(0, 64, (5, 2)), False).item() >= 0


def test_loss_gradients():
    rng = np.random.default_rng(4)
    g = (rng.random((5, 5)) < 0.4).astype(float)
    z = rng.normal(size=(5, 5))
    assert nx.grad_check(lambda t: loss_ce(t, g), z) < 1e-4
    assert nx.grad_check(lambda t: loss_dice(t, g), z) < 1e-4
    target = rng.uniform(0, 64, 4)
    assert nx.grad_check(lambda t: loss_offsets(t, target), target + rng.uniform(1, 5, 4)) < 1e-4
    gt_pts = rng.uniform(0, 64, (2, 5, 2))
    pred = rng.uniform(0, 64, (2, 5, 2))
    assert nx.grad_check(lambda t: loss_points(t, gt_pts, [False, False]), pred) < 1e-4
