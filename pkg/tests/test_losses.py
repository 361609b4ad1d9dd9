import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nucleiforge.losses import (
    EPS,
    EflParams,
    binary_cross_entropy,
    ciou_alpha,
    ciou_loss,
    cross_entropy,
    dice_loss,
    efl,
    focal_loss,
    grad_check,
    sample_box_pair,
)

STEP = 1e-5
POINTS = 100


def random_simplex(rng, n, k, floor=0.02):
    p = rng.dirichlet(np.ones(k), size=n)
    return (1 - k * floor) * p + floor


# --- cross entropy ---------------------------------------------------------


def test_ce_one_hot_correct():
    p = np.array([[1 - EPS, EPS / 2, EPS / 2]])
    assert cross_entropy(p, [0]).value == pytest.approx(0.0, abs=1e-6)


@pytest.mark.parametrize("k", [2, 3, 7])
def test_ce_uniform_is_log_k(k):
    p = np.full((4, k), 1 / k)
    assert cross_entropy(p, [0, 1, 0, 1]).value == pytest.approx(math.log(k), abs=1e-12)


def test_ce_shape_errors():
    with pytest.raises(ValueError):
        cross_entropy(np.full((3, 2), 0.5), [0, 1])


def test_ce_grad_at_uniform():
    p = np.full((5, 4), 0.25)
    t = np.array([0, 1, 2, 3, 0])
    assert grad_check(lambda x: cross_entropy(x, t), p, STEP, lower=0, upper=1) < 1e-6


def test_ce_grad_random_points():
    rng = np.random.default_rng(10)
    worst = 0.0
    for _ in range(POINTS):
        p = random_simplex(rng, 4, 3)
        t = rng.integers(0, 3, 4)
        worst = max(worst, grad_check(lambda x: cross_entropy(x, t), p, STEP, lower=0, upper=1))
    assert worst < 1e-4


# --- dice ------------------------------------------------------------------


def test_dice_exact_target():
    t = (np.random.default_rng(0).random((8, 8)) > 0.5).astype(float)
    assert dice_loss(t, t).value == pytest.approx(0.0, abs=1e-12)


def test_dice_half_coverage():
    n = 1000
    t = np.zeros(n)
    t[: n // 2] = 1
    assert dice_loss(np.full(n, 0.5), t).value == pytest.approx(0.5, abs=1e-5)


def test_dice_shape_error():
    with pytest.raises(ValueError):
        dice_loss(np.zeros(3), np.zeros(4))


def test_dice_grad_random_points():
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(POINTS):
        p = rng.uniform(0.02, 0.98, (6, 6))
        t = (rng.random((6, 6)) > 0.5).astype(float)
        worst = max(worst, grad_check(lambda x: dice_loss(x, t), p, STEP, lower=0, upper=1))
    assert worst < 1e-4


# --- EFL -------------------------------------------------------------------


def _efl_inputs(rng, n=5, c=3, lo=0.02):
    return rng.uniform(lo, 1 - lo, (n, c)), (rng.random((n, c)) > 0.7).astype(float)


def test_efl_params_validation():
    with pytest.raises(ValueError):
        EflParams(gamma_b=-1.0)
    with pytest.raises(ValueError):
        EflParams(gamma_b=0.0, gamma_v=(0.0, 1.0))
    with pytest.raises(ValueError):
        EflParams(gamma_b=1.0, gamma_v=(np.inf,))
    with pytest.raises(ValueError):
        EflParams(gamma_b=1.0, gamma_v=(-0.5,))
    assert EflParams(2.0, (0.0, 1.0, 3.0)).weights.tolist() == [1.0, 1.5, 2.5]


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 9), c=st.integers(1, 6), gamma=st.floats(0.1, 5.0))
def test_efl_reduces_to_focal(seed, n, c, gamma):
    p, t = _efl_inputs(np.random.default_rng(seed), n, c)
    e = efl(p, t, EflParams(gamma, (0.0,) * c))
    f = focal_loss(p, t, gamma)
    assert e.value == f.value
    assert np.array_equal(e.grad, f.grad)


def test_efl_total_gamma_zero_is_cross_entropy():
    p, t = _efl_inputs(np.random.default_rng(1))
    e = efl(p, t, EflParams(0.0, (0.0, 0.0, 0.0)))
    # binary cross entropy written out directly
    ref = -np.mean(np.where(t > 0.5, np.log(p), np.log(1 - p)))
    ref_grad = np.where(t > 0.5, -1 / p, 1 / (1 - p)) / p.size
    assert e.value == pytest.approx(ref, rel=1e-15)
    assert np.allclose(e.grad, ref_grad, rtol=1e-15, atol=0)
    assert e.value == binary_cross_entropy(p, t).value


def test_efl_uniform_variable_factor_is_scaled_focal():
    p, t = _efl_inputs(np.random.default_rng(2))
    params = EflParams(2.0, (1.0, 1.0, 1.0))
    e = efl(p, t, params)
    f = focal_loss(p, t, 3.0)
    assert e.value == pytest.approx(1.5 * f.value, rel=1e-14)
    assert np.allclose(e.grad, 1.5 * f.grad, rtol=1e-14, atol=0)
    assert np.argmin(e.grad) == np.argmin(f.grad)


def test_efl_shape_errors():
    p, t = _efl_inputs(np.random.default_rng(3))
    with pytest.raises(ValueError):
        efl(p, t, EflParams(2.0, (0.0, 1.0)))
    with pytest.raises(ValueError):
        efl(p, t[:, :2], EflParams(2.0, (0.0, 1.0, 3.0)))


def test_efl_grad_random_points():
    rng = np.random.default_rng(12)
    params = EflParams(2.0, (0.0, 1.0, 3.0))
    worst = 0.0
    # with a focusing factor of 5, easy elements nearer 0 or 1 have gradients
    # around 1e-8 and the relative error there only measures roundoff
    for _ in range(POINTS):
        p, t = _efl_inputs(rng, lo=0.05)
        worst = max(worst, grad_check(lambda x: efl(x, t, params), p, STEP, lower=0, upper=1))
    assert worst < 1e-4


# --- CIoU ------------------------------------------------------------------


def test_ciou_identical_boxes():
    assert ciou_loss((3, 4, 5, 6), (3, 4, 5, 6)).value == pytest.approx(0.0, abs=1e-15)


def test_ciou_separated_unit_squares():
    assert ciou_loss((0, 0, 1, 1), (10, 0, 1, 1)).value == pytest.approx(1 + 100 / 122, abs=1e-12)
    assert round(1 + 100 / 122, 4) == 1.8197


def test_ciou_rejects_degenerate():
    with pytest.raises(ValueError):
        ciou_loss((0, 0, 0, 1), (0, 0, 1, 1))


box = st.tuples(
    st.floats(-50, 50), st.floats(-50, 50), st.floats(0.1, 40), st.floats(0.1, 40)
)


@settings(max_examples=300, deadline=None)
@given(a=box, b=box)
def test_ciou_bounds(a, b):
    v = ciou_loss(a, b).value
    assert -1e-12 <= v <= 3.0
    assert np.isfinite(ciou_loss(a, b).grad).all()


def test_ciou_grad_random_points():
    rng = np.random.default_rng(13)
    worst = 0.0
    for _ in range(POINTS):
        pred, gt = sample_box_pair(rng, 10 * STEP)
        a = ciou_alpha(pred, gt)
        worst = max(worst, grad_check(lambda x: ciou_loss(x, gt, a), pred, STEP))
    assert worst < 1e-3


# --- harness ---------------------------------------------------------------


def test_harness_quadratic():
    rng = np.random.default_rng(0)
    m = rng.normal(size=(5, 5))
    a = m @ m.T
    b = rng.normal(size=5)

    class Q:
        def __init__(self, x):
            self.value = 0.5 * x @ a @ x + b @ x
            self.grad = a @ x + b

    assert grad_check(Q, rng.normal(size=5), 1e-3) < 1e-10


def test_harness_margin():
    t = np.array([0])
    with pytest.raises(ValueError, match="lower"):
        grad_check(lambda x: cross_entropy(x, t), np.array([[5e-5, 1 - 5e-5]]), 1e-5, lower=0, upper=1)
    with pytest.raises(ValueError, match="upper"):
        grad_check(lambda x: dice_loss(x, np.ones(2)), np.array([0.5, 1 - 5e-5]), 1e-5, lower=0, upper=1)


SWEEP = (1e-3, 1e-4, 1e-5)


def test_step_sweep_is_u_shaped():
    """Truncation error dominates at large steps and roundoff at small ones."""
    rng = np.random.default_rng(14)
    errs = []
    for _ in range(POINTS):
        pred, gt = sample_box_pair(rng, 10 * SWEEP[0])
        a = ciou_alpha(pred, gt)
        errs.append([grad_check(lambda x: ciou_loss(x, gt, a), pred, s) for s in SWEEP])
    med = np.median(errs, axis=0)
    assert med[1] < med[0] and med[1] < med[2]


def test_ce_sweep_turns_below_the_grid():
    # cross entropy is smooth enough that roundoff only takes over below 1e-5
    t = np.array([0, 1, 1, 0])
    p = np.tile([0.3, 0.7], (4, 1))
    steps = 10.0 ** -np.arange(2, 11)
    errs = [grad_check(lambda x: cross_entropy(x, t), p, s) for s in steps]
    k = int(np.argmin(errs))
    assert 0 < k < len(steps) - 1
    assert all(errs[i] > errs[i + 1] for i in range(k))
    assert errs[-1] > errs[k]


# --- shared properties -----------------------------------------------------


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_losses_non_negative(seed):
    rng = np.random.default_rng(seed)
    p = random_simplex(rng, 3, 4, floor=0.0)
    assert cross_entropy(p, rng.integers(0, 4, 3)).value >= 0
    q = rng.random((4, 4))
    t = (rng.random((4, 4)) > 0.5).astype(float)
    assert dice_loss(q, t).value >= 0
    assert efl(q, t, EflParams(2.0, (0.0, 1.0, 3.0, 0.5))).value >= 0
