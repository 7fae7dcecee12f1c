import math

import numpy as np
import pytest
import torch

from relcollab.data import ConfigError
from relcollab.losses import (
    RampSchedule, cross_entropy_loss, deep_supervision_weights, dice_loss, ramp_lambda, rc_general_loss,
    rc_target_loss, seg_loss,
)
from oracles import fd_max_rel_error
from relcollab.relation import compute_relation


def test_dice_perfect_overlap():
    x = torch.ones(4, 4)
    assert dice_loss(x, x) <= 1e-5


def test_dice_disjoint_matches_formula():
    eps = 1e-5
    got = dice_loss(torch.ones(4, 4), torch.zeros(4, 4), eps=eps)
    assert math.isclose(float(got), 1 - eps / (16 + eps), rel_tol=1e-6)


def test_dice_empty_empty_is_zero():
    assert float(dice_loss(torch.zeros(3, 3), torch.zeros(3, 3))) == 0.0


def test_shape_mismatch_raises():
    with pytest.raises(ValueError):
        dice_loss(torch.zeros(2, 2), torch.zeros(3, 3))
    with pytest.raises(ValueError):
        cross_entropy_loss(torch.zeros(2, 2), torch.zeros(3, 3))


def test_ce_half_probability_is_ln2():
    target = (torch.rand(5, 5) > 0.5).float()
    assert abs(float(cross_entropy_loss(torch.full((5, 5), 0.5), target)) - math.log(2)) < 1e-4


def test_ce_confident_correct_and_wrong():
    target = (torch.rand(6, 6) > 0.5).double()
    right = float(cross_entropy_loss(target.clone(), target))
    assert right <= -math.log(1 - 1e-7) * 1.0001
    wrong = float(cross_entropy_loss(1 - target, target))
    assert wrong >= 10
    assert math.isclose(wrong, -math.log(1e-7), rel_tol=1e-6)


def test_ce_logits_path_agrees():
    logits = torch.randn(4, 4, dtype=torch.float64)
    target = (torch.rand(4, 4) > 0.5).double()
    a = cross_entropy_loss(logits, target, logits=True)
    b = cross_entropy_loss(torch.sigmoid(logits), target)
    assert torch.allclose(a, b)


def test_deep_supervision_weights():
    for n in range(1, 6):
        w = deep_supervision_weights(n)
        assert abs(sum(w) - 1) < 1e-9
        assert all(a == 2 * b for a, b in zip(w, w[1:]))


def test_seg_loss_single_scale_perfect():
    t = (torch.rand(2, 1, 8, 8) > 0.5).float()
    assert seg_loss([t.clone()], t) <= 1e-5


def test_seg_loss_two_scale_constant_half_empty_target():
    eps = 1e-5
    target = torch.zeros(1, 1, 8, 8)
    outs = [torch.full((1, 1, 8, 8), 0.5), torch.full((1, 1, 4, 4), 0.5)]
    # closed form per scale: dice = 1 - eps / (0.5*N + eps), ce = ln 2
    d8 = 1 - eps / (0.5 * 64 + eps)
    d4 = 1 - eps / (0.5 * 16 + eps)
    expected = (2 / 3) * (d8 + math.log(2)) + (1 / 3) * (d4 + math.log(2))
    assert abs(float(seg_loss(outs, target)) - expected) < 1e-5


def test_seg_loss_empty_outputs():
    with pytest.raises(ValueError):
        seg_loss([], torch.zeros(1, 1, 2, 2))


def test_seg_loss_nonnegative_random():
    for _ in range(10):
        t = (torch.rand(2, 1, 8, 8) > 0.7).float()
        outs = [torch.rand(2, 1, 8, 8), torch.rand(2, 1, 4, 4)]
        assert seg_loss(outs, t) >= 0


def test_rc_general_examples():
    r1, r2 = torch.eye(2), torch.tensor([[0.0, 1.0], [1.0, 0.0]])
    assert float(rc_general_loss(r1, r1, 1.0)) == 0
    assert float(rc_general_loss(r1, r2, 1.0)) == 4
    assert float(rc_general_loss(r1, r2, 0.0)) == 0
    with pytest.raises(ValueError):
        rc_general_loss(torch.eye(2), torch.eye(3), 1.0)


def test_rc_target_examples():
    r1, r2 = torch.eye(2), torch.tensor([[0.0, 1.0], [1.0, 0.0]])
    assert float(rc_target_loss(r1, r1, 1.0)) == 0
    assert float(rc_target_loss(r1, r2, 1.0)) == -4
    assert float(rc_target_loss(r1, r2, 1.0, clamp=1.0)) == -1
    with pytest.raises(ValueError):
        rc_target_loss(torch.eye(2), torch.eye(3), 1.0)


def test_rc_losses_symmetric_and_permutation_invariant():
    a = compute_relation(torch.randn(2, 4, 5, 5, dtype=torch.float64))
    b = compute_relation(torch.randn(2, 4, 5, 5, dtype=torch.float64))
    p = torch.eye(4, dtype=torch.float64)[[2, 0, 3, 1]]
    for fn in (rc_general_loss, rc_target_loss):
        assert torch.allclose(fn(a, b, 0.3), fn(b, a, 0.3))
        assert torch.allclose(fn(p @ a @ p.T, p @ b @ p.T, 0.3), fn(a, b, 0.3))


def test_rc_target_descent_pushes_apart():
    fg = torch.randn(1, 3, 4, 4, dtype=torch.float64)
    ft = torch.randn(1, 3, 4, 4, dtype=torch.float64, requires_grad=True)
    rg = compute_relation(fg)
    before = float(((rg - compute_relation(ft.detach())) ** 2).sum())
    loss = rc_target_loss(rg, compute_relation(ft), 1.0)
    (g,) = torch.autograd.grad(loss, ft)
    with torch.no_grad():
        after = float(((rg - compute_relation(ft - 0.01 * g)) ** 2).sum())
    assert after > before


def test_rc_target_bounded_by_4c():
    for _ in range(20):
        c = 5
        a = compute_relation(torch.randn(1, c, 3, 3))
        b = compute_relation(torch.randn(1, c, 3, 3))
        assert -float(rc_target_loss(a, b, 1.0)) <= 4 * c + 1e-6


def test_ramp_examples():
    s = RampSchedule(base=0.1, t_max=100)
    assert ramp_lambda(100, s) == 0.1
    assert abs(ramp_lambda(0, s) - 0.1 * math.exp(-5)) < 1e-9
    assert abs(ramp_lambda(0, s) - 6.738e-4) < 1e-7
    assert ramp_lambda(500, s) == 0.1
    vals = [ramp_lambda(t, s) for t in range(0, 150)]
    assert all(b >= a for a, b in zip(vals, vals[1:]))
    assert max(vals) <= 0.1


def test_ramp_literal_form():
    s = RampSchedule(base=0.1, t_max=10, gaussian=False)
    assert ramp_lambda(10, s) == 0.1
    assert abs(ramp_lambda(5, s) - 0.1 * math.exp(-2.5)) < 1e-12


def test_ramp_config_errors():
    with pytest.raises(ConfigError):
        RampSchedule(t_max=0)
    with pytest.raises(ValueError):
        ramp_lambda(-1, RampSchedule())


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_relation_loss_gradients_fd(seed):
    gen = torch.Generator().manual_seed(seed)
    other = torch.randn(1, 2, 4, 4, dtype=torch.float64, generator=gen)
    x = torch.randn(1, 2, 4, 4, dtype=torch.float64, generator=gen)
    r_other = compute_relation(other)
    assert fd_max_rel_error(lambda f: rc_general_loss(r_other, compute_relation(f), 0.7), x) <= 1e-3
    assert fd_max_rel_error(lambda f: rc_target_loss(r_other, compute_relation(f), 0.7), x) <= 1e-3


def test_segmentation_loss_gradients_fd():
    gen = torch.Generator().manual_seed(5)
    target = (torch.rand(1, 1, 4, 4, generator=gen) > 0.5).double()
    logits = torch.randn(1, 1, 4, 4, dtype=torch.float64, generator=gen)
    assert fd_max_rel_error(lambda z: dice_loss(torch.sigmoid(z), target), logits) <= 1e-3
    assert fd_max_rel_error(lambda z: cross_entropy_loss(torch.sigmoid(z), target), logits) <= 1e-3
