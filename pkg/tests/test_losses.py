import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st

from aerial_icl import losses as L
from aerial_icl.dihedral import ALL_TRANSFORMS, Transform, apply_transform
from oracles import central_difference, unbiased_ce, unbiased_kd


def t64(a, grad=False):
    return torch.tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


def px(values):
    """A single-pixel logit map (1, C, 1, 1)."""
    return t64(values).reshape(1, -1, 1, 1)


# -- unbiased cross-entropy ---------------------------------------------------


def test_uce_step0_uniform_background():
    loss = L.unbiased_cross_entropy(px([0, 0]), torch.zeros(1, 1, 1, dtype=torch.long))
    assert float(loss) == pytest.approx(math.log(2), abs=1e-12)


def test_uce_background_absorbs_old_class():
    # oracle: p = [1/3]*3, grouped background = p_b + p_old = 2/3
    expected = unbiased_ce(np.zeros((1, 3, 1, 1)), np.zeros((1, 1, 1), int), [1])
    assert expected == pytest.approx(-math.log(2 / 3))
    loss = L.unbiased_cross_entropy(px([0, 0, 0]), torch.zeros(1, 1, 1, dtype=torch.long), [1])
    assert float(loss) == pytest.approx(0.4054651081, abs=1e-9)


def test_uce_new_class_pixel():
    expected = unbiased_ce(np.zeros((1, 3, 1, 1)), np.full((1, 1, 1), 2), [1])
    loss = L.unbiased_cross_entropy(px([0, 0, 0]), torch.full((1, 1, 1), 2), [1])
    assert float(loss) == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx(1.0986122887, abs=1e-9)


def test_uce_reduces_to_standard(rng):
    logits = t64(rng.normal(size=(2, 4, 5, 5)) * 3)
    target = torch.from_numpy(rng.integers(0, 4, (2, 5, 5)))
    a = L.unbiased_cross_entropy(logits, target, [])
    b = F.cross_entropy(logits, target)
    assert abs(float(a - b)) < 1e-7


def test_uce_target_out_of_range():
    with pytest.raises(ValueError):
        L.unbiased_cross_entropy(px([0, 0]), torch.full((1, 1, 1), 2))


def test_uce_ignore_index():
    logits = t64(np.zeros((1, 2, 1, 2)))
    target = torch.tensor([[[0, 255]]])
    loss = L.unbiased_cross_entropy(logits, target, ignore_index=255)
    assert float(loss) == pytest.approx(math.log(2))


def test_uce_extreme_logits_stay_finite():
    logits = px([1e4, -1e4, -1e4])
    target = torch.full((1, 1, 1), 2)
    loss = L.unbiased_cross_entropy(logits, target, [1])
    assert torch.isfinite(loss) and float(loss) == pytest.approx(2e4)
    loss0 = L.unbiased_cross_entropy(px([-1e4, 1e4, -1e4]), torch.zeros(1, 1, 1, dtype=torch.long), [1])
    assert float(loss0) == pytest.approx(0.0, abs=1e-9)


# -- unbiased distillation ----------------------------------------------------


def test_kd_matched_student():
    teacher, student = px([0, 0]), px([0, 0, -1000])
    assert unbiased_kd(student.numpy(), teacher.numpy()) == pytest.approx(math.log(2))
    assert float(L.unbiased_kd(student, teacher)) == pytest.approx(math.log(2), abs=1e-12)


def test_kd_background_certain_teacher():
    teacher = px([50, -50])  # background probability 1 - 1e-43
    loss = L.unbiased_kd(px([0, 0, 0]), teacher)
    assert float(loss) == pytest.approx(-math.log(2 / 3), abs=1e-9)


def test_kd_matched_student_is_a_minimum():
    rng = np.random.default_rng(11)
    teacher = px([0, 0])
    base = float(L.unbiased_kd(px([0, 0, -1000]), teacher))
    for _ in range(200):
        d = rng.normal(size=3) * rng.choice([1e-3, 1e-1, 1.0])
        assert float(L.unbiased_kd(px(np.array([0, 0, -1000]) + d), teacher)) >= base - 1e-12


def test_kd_grouped_background_identity(rng):
    s = t64(rng.normal(size=(2, 5, 4, 4)) * 2)
    log_q = L.grouped_log_probs(s, 3)
    p = torch.softmax(s, 1)
    np.testing.assert_allclose(log_q[:, 0].exp(), 1 - p[:, 1:3].sum(1), atol=1e-6)


def test_kd_shape_mismatch_and_teacher_grad():
    with pytest.raises(ValueError):
        L.unbiased_kd(t64(np.zeros((1, 3, 2, 2))), t64(np.zeros((1, 2, 3, 3))))
    with pytest.raises(ValueError):
        L.unbiased_kd(t64(np.zeros((1, 2, 2, 2))), t64(np.zeros((1, 3, 2, 2))))
    with pytest.raises(ValueError):
        L.unbiased_kd(t64(np.zeros((1, 3, 2, 2))), t64(np.zeros((1, 2, 2, 2)), grad=True))


def test_kd_gradient_only_reaches_student(rng):
    student = t64(rng.normal(size=(1, 3, 2, 2)), grad=True)
    net = torch.nn.Conv2d(2, 2, 1).double()
    with torch.no_grad():
        teacher = net(t64(rng.normal(size=(1, 2, 2, 2))))
    L.unbiased_kd(student, teacher).backward()
    assert student.grad is not None and net.weight.grad is None


# -- oracle equivalence (property) --------------------------------------------


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 4), st.integers(1, 8), st.integers(0, 2**32 - 1))
def test_uce_matches_oracle(c, hw, seed):
    r = np.random.default_rng(seed)
    logits = r.normal(size=(1, c, hw, hw)) * 3
    n_old = int(r.integers(0, c - 1))
    old = list(range(1, 1 + n_old))
    legal = [0] + list(range(1 + n_old, c))
    target = r.choice(legal, size=(1, hw, hw))
    got = float(L.unbiased_cross_entropy(t64(logits), torch.from_numpy(target), old))
    assert got == pytest.approx(unbiased_ce(logits, target, old), abs=1e-6)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 4), st.integers(1, 8), st.integers(0, 2**32 - 1))
def test_kd_matches_oracle(cs, hw, seed):
    r = np.random.default_rng(seed)
    ct = int(r.integers(2, cs + 1))
    s = r.normal(size=(1, cs, hw, hw)) * 3
    t = r.normal(size=(1, ct, hw, hw)) * 3
    got = float(L.unbiased_kd(t64(s), t64(t)))
    assert got == pytest.approx(unbiased_kd(s, t), abs=1e-6)


# -- invariance terms ---------------------------------------------------------


def test_inv_seg_identity_zero(rng):
    f = t64(rng.normal(size=(1, 3, 4, 4)))
    assert float(L.invariance_seg_loss(f, f, Transform.IDENTITY)) == 0.0


def test_inv_seg_constant_map_zero():
    f = t64(np.full((2, 3, 4, 4), 1.7))
    for t in ALL_TRANSFORMS:
        assert float(L.invariance_seg_loss(f, f, t)) == 0.0


def test_inv_seg_mse_value():
    aug = t64([[[1, 2], [3, 4]]])
    target = np.array([[[1, 2], [3, 2]]], dtype=float)
    plain = t64(np.rot90(target, -1, axes=(-2, -1)).copy())  # rot90(plain) == target
    assert float(L.invariance_seg_loss(aug, plain, Transform.ROT90)) == pytest.approx(1.0)
    assert float(L.invariance_kd_loss(aug, plain, Transform.ROT90)) == pytest.approx(1.0)


def test_inv_kd_equivariant_zero(rng):
    plain = t64(rng.normal(size=(1, 2, 3, 3)))
    for t in ALL_TRANSFORMS:
        aug = apply_transform(t, plain)
        assert float(L.invariance_kd_loss(aug, plain, t)) == 0.0


def test_inv_per_sample_transforms(rng):
    plain = t64(rng.normal(size=(2, 2, 3, 3)))
    ts = [Transform.ROT90, Transform.HFLIP]
    aug = torch.stack([apply_transform(t, plain[i]) for i, t in enumerate(ts)])
    assert float(L.invariance_seg_loss(aug, plain, ts)) == 0.0


def test_inv_shape_mismatch_and_teacher_grad():
    with pytest.raises(ValueError):
        L.invariance_seg_loss(t64(np.zeros((1, 2, 3))), t64(np.zeros((1, 3, 2))), Transform.IDENTITY)
    with pytest.raises(ValueError):
        L.invariance_kd_loss(t64(np.zeros((1, 2, 2))), t64(np.zeros((1, 2, 2)), grad=True), Transform.IDENTITY)


def test_inv_seg_gradient_reaches_both(rng):
    a = t64(rng.normal(size=(1, 3, 3)), grad=True)
    b = t64(rng.normal(size=(1, 3, 3)), grad=True)
    L.invariance_seg_loss(a, b, Transform.ROT90).backward()
    assert a.grad.abs().sum() > 0 and b.grad.abs().sum() > 0


# -- non-negativity -----------------------------------------------------------


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(ALL_TRANSFORMS))
def test_all_losses_nonnegative(seed, t):
    r = np.random.default_rng(seed)
    s = t64(r.normal(size=(1, 4, 3, 3)) * 5)
    te = t64(r.normal(size=(1, 3, 3, 3)) * 5)
    y = torch.from_numpy(r.choice([0, 3], size=(1, 3, 3)))
    f1, f2 = t64(r.normal(size=(1, 2, 3, 3))), t64(r.normal(size=(1, 2, 3, 3)))
    assert float(L.unbiased_cross_entropy(s, y, [1, 2])) >= 0
    assert float(L.unbiased_kd(s, te)) >= 0
    assert float(L.invariance_seg_loss(f1, f2, t)) >= 0
    assert float(L.invariance_kd_loss(f1, f2, t)) >= 0


# -- gradients vs finite differences ------------------------------------------


def _rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_gradients_match_finite_differences(seed):
    r = np.random.default_rng(seed)
    logits = r.normal(size=(1, 3, 3, 3))
    target = torch.from_numpy(r.choice([0, 2], size=(1, 3, 3)))
    teacher = t64(r.normal(size=(1, 2, 3, 3)))
    feat_a, feat_b = r.normal(size=(1, 2, 3, 3)), r.normal(size=(1, 2, 3, 3))
    t = ALL_TRANSFORMS[seed % 8]
    cases = {
        "uce": (lambda x: L.unbiased_cross_entropy(x, target, [1]), logits),
        "kd": (lambda x: L.unbiased_kd(x, teacher), logits),
        "inv_seg_aug": (lambda x: L.invariance_seg_loss(x, t64(feat_b), t), feat_a),
        "inv_seg_plain": (lambda x: L.invariance_seg_loss(t64(feat_a), x, t), feat_b),
        "inv_kd": (lambda x: L.invariance_kd_loss(x, t64(feat_b), t), feat_a),
    }
    for name, (fn, x0) in cases.items():
        x = t64(x0, grad=True)
        fn(x).backward()
        numeric = central_difference(lambda v: float(fn(t64(v))), x0.copy())
        assert _rel_err(x.grad.numpy(), numeric) < 1e-4, name


# -- total loss ---------------------------------------------------------------


def _s(v):
    return torch.tensor(v, dtype=torch.float64)


def test_total_all_zero_weights():
    b = L.total_loss(_s(1.3), L.LossWeights(0, 0, 0), 2, kd=_s(0.5), inv_seg=_s(0.2), inv_kd=_s(0.4))
    assert float(b.total) == pytest.approx(1.3)


def test_total_weighted_sum():
    b = L.total_loss(_s(1.0), L.LossWeights(1, 0.1, 0.1), 1, kd=_s(0.5), inv_seg=_s(0.2), inv_kd=_s(0.4))
    assert float(b.total) == pytest.approx(1.56, abs=1e-12)
    assert float(b.total) == pytest.approx(float(b.ce + b.kd + 0.1 * b.inv_seg + 0.1 * b.inv_kd), abs=1e-6)


def test_total_step0():
    b = L.total_loss(_s(0.7), L.LossWeights(1, 0.1, 0.1), 0, inv_seg=_s(0.3))
    assert float(b.total) == pytest.approx(0.73)
    with pytest.raises(ValueError):
        L.total_loss(_s(0.7), L.LossWeights(), 0, kd=_s(0.1))
    with pytest.raises(ValueError):
        L.total_loss(_s(0.7), L.LossWeights(), 0, inv_kd=_s(0.1))


def test_loss_weights_nonnegative():
    with pytest.raises(ValueError):
        L.LossWeights(-1.0)
