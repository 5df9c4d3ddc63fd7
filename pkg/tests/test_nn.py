import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from helpers import numeric_grad, rel_err
from mabert import nn

SEEDS = range(20)
finite = st.floats(-50, 50, allow_nan=False)


def naive_matmul(x, w):
    out = np.zeros((x.shape[0], w.shape[1]))
    for i in range(x.shape[0]):
        for j in range(w.shape[1]):
            for k in range(x.shape[1]):
                out[i, j] += x[i, k] * w[k, j]
    return out


# -- linear -----------------------------------------------------------------


def test_linear_identity_and_zero_input():
    x = np.arange(6.0).reshape(2, 3)
    y, _ = nn.linear(x, np.eye(3), np.zeros(3))
    np.testing.assert_array_equal(y, x)
    b = np.array([1.0, -2.0])
    y, _ = nn.linear(np.zeros((4, 3)), np.ones((3, 2)), b)
    np.testing.assert_array_equal(y, np.tile(b, (4, 1)))


def test_linear_matches_triple_loop():
    rng = np.random.default_rng(0)
    x, w, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2)), rng.normal(size=2)
    y, _ = nn.linear(x, w, b)
    np.testing.assert_allclose(y, naive_matmul(x, w) + b, rtol=1e-12, atol=1e-12)


def test_linear_shape_mismatch():
    with pytest.raises(ValueError, match="does not match"):
        nn.linear(np.zeros((2, 3)), np.zeros((4, 2)))


@pytest.mark.parametrize("seed", SEEDS)
def test_linear_gradients(seed):
    rng = np.random.default_rng(seed)
    x, w, b = rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 5)), rng.normal(size=5)
    r = rng.normal(size=(2, 3, 5))

    def f():
        return float((nn.linear(x, w, b)[0] * r).sum())

    dx, dw, db = nn.linear_backward(r, x, w)
    for arr, an in ((x, dx), (w, dw), (b, db)):
        assert rel_err(an, numeric_grad(f, arr)) < 1e-4


# -- layer norm -------------------------------------------------------------


def test_layer_norm_constant_input_gives_shift():
    shift = np.array([0.5, -1.0, 2.0])
    y, _ = nn.layer_norm(np.full((2, 3), 7.0), np.array([2.0, 3.0, 4.0]), shift)
    np.testing.assert_allclose(y, np.tile(shift, (2, 1)))


@given(arrays(float, (4, 6), elements=st.floats(-100, 100, allow_nan=False)))
def test_layer_norm_standardizes_rows(x):
    x = x + np.linspace(0, 1, 6)  # avoid constant rows, where variance is eps-dominated
    y, _ = nn.layer_norm(x, np.ones(6), np.zeros(6))
    assert np.all(np.abs(y.mean(axis=-1)) < 1e-9)
    var = x.var(axis=-1)
    # the eps inside the root shrinks variance by var / (var + eps)
    np.testing.assert_allclose(y.var(axis=-1), var / (var + nn.LN_EPS), rtol=1e-9)
    big = var > 1.0
    assert np.all(np.abs(y.var(axis=-1)[big] - 1.0) < 1e-4)


def test_layer_norm_unit_variance_on_spread_rows():
    rng = np.random.default_rng(3)
    x = rng.normal(scale=10.0, size=(5, 8))
    y, _ = nn.layer_norm(x, np.ones(8), np.zeros(8))
    assert np.all(np.abs(y.var(axis=-1) - 1.0) < 1e-6)


@pytest.mark.parametrize("seed", SEEDS)
def test_layer_norm_gradients(seed):
    rng = np.random.default_rng(seed)
    x, g, s = rng.normal(size=(3, 5)), rng.normal(size=5), rng.normal(size=5)
    r = rng.normal(size=(3, 5))

    def f():
        return float((nn.layer_norm(x, g, s)[0] * r).sum())

    _, cache = nn.layer_norm(x, g, s)
    dx, dg, ds = nn.layer_norm_backward(r, cache)
    for arr, an in ((x, dx), (g, dg), (s, ds)):
        assert rel_err(an, numeric_grad(f, arr)) < 1e-4


def test_layer_norm_gradient_fine_step():
    rng = np.random.default_rng(99)
    x, g, s, r = rng.normal(size=(2, 4)), rng.normal(size=4), rng.normal(size=4), rng.normal(size=(2, 4))
    _, cache = nn.layer_norm(x, g, s)
    dx, _, _ = nn.layer_norm_backward(r, cache)
    num = numeric_grad(lambda: float((nn.layer_norm(x, g, s)[0] * r).sum()), x, h=1e-5)
    assert rel_err(dx, num) < 1e-4


# -- relu -------------------------------------------------------------------


@pytest.mark.parametrize("seed", SEEDS)
def test_relu_gradients(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(4, 5))
    x[np.abs(x) < 1e-2] = 0.5  # keep away from the kink
    r = rng.normal(size=x.shape)
    y, pos = nn.relu(x)
    assert np.all(y >= 0)
    num = numeric_grad(lambda: float((nn.relu(x)[0] * r).sum()), x)
    assert rel_err(nn.relu_backward(r, pos), num) < 1e-4


# -- softmax ----------------------------------------------------------------


def test_softmax_uniform_and_single_slot():
    np.testing.assert_allclose(nn.softmax_rows(np.full((1, 4), 3.0)), 0.25)
    mask = np.array([[nn.MASK_VALUE, 0.0, nn.MASK_VALUE]])
    np.testing.assert_array_equal(nn.softmax_rows(np.array([[5.0, -2.0, 9.0]]), mask), [[0.0, 1.0, 0.0]])


def test_softmax_fully_masked_row_is_zero():
    mask = np.array([[0.0, 0.0], [nn.MASK_VALUE, nn.MASK_VALUE]])
    y = nn.softmax_rows(np.ones((2, 2)), mask)
    np.testing.assert_allclose(y[0], 0.5)
    np.testing.assert_array_equal(y[1], 0.0)


@given(arrays(float, (3, 5), elements=finite), st.floats(-1e3, 1e3, allow_nan=False))
def test_softmax_shift_invariance(x, c):
    np.testing.assert_allclose(nn.softmax_rows(x), nn.softmax_rows(x + c), atol=1e-12)


@given(arrays(float, (3, 6), elements=finite), arrays(bool, (3, 6)))
def test_softmax_rows_sum_to_one_and_masked_slots_vanish(x, keep):
    keep[:, 0] = True
    mask = np.where(keep, 0.0, nn.MASK_VALUE)
    y = nn.softmax_rows(x, mask)
    np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-12)
    assert np.all(y[~keep] < 1e-30)


@pytest.mark.parametrize("seed", SEEDS)
def test_softmax_gradients(seed):
    rng = np.random.default_rng(seed)
    x, r = rng.normal(size=(3, 6)), rng.normal(size=(3, 6))
    mask = np.where(rng.random((3, 6)) < 0.3, nn.MASK_VALUE, 0.0)
    mask[:, 0] = 0.0
    y = nn.softmax_rows(x, mask)
    num = numeric_grad(lambda: float((nn.softmax_rows(x, mask) * r).sum()), x)
    assert rel_err(nn.softmax_backward(r, y), num) < 1e-4


# -- dropout ----------------------------------------------------------------


def test_dropout_identity_cases():
    x = np.arange(10.0)
    rng = np.random.default_rng(0)
    assert nn.dropout(x, 0.0, True, rng)[0] is x
    assert nn.dropout(x, 0.5, False, rng)[0] is x
    with pytest.raises(ValueError):
        nn.dropout(x, 1.0, True, rng)


def test_dropout_keep_rate_monte_carlo():
    p = 0.1
    y, scale = nn.dropout(np.ones(100_000), p, True, np.random.default_rng(7))
    keep = np.mean(y != 0)
    assert abs(keep - (1 - p)) < 0.01
    np.testing.assert_allclose(y[y != 0], 1 / (1 - p))
    assert abs(y.mean() - 1.0) < 0.01


@pytest.mark.parametrize("seed", SEEDS)
def test_dropout_gradients(seed):
    rng = np.random.default_rng(seed)
    x, r = rng.normal(size=(4, 5)), rng.normal(size=(4, 5))
    _, scale = nn.dropout(x, 0.3, True, np.random.default_rng(seed))

    def f():  # same draw each call
        return float((nn.dropout(x, 0.3, True, np.random.default_rng(seed))[0] * r).sum())

    assert rel_err(nn.dropout_backward(r, scale), numeric_grad(f, x)) < 1e-4


# -- losses -----------------------------------------------------------------


def test_loss_examples():
    y = np.array([1.0, 2.0, 3.0])
    assert nn.mse(y, y)[0] == 0.0
    assert nn.bce(np.array([0.0]), np.array([1.0]))[0] == pytest.approx(np.log(2), abs=1e-15)
    for k in (2, 5, 10):
        assert nn.cce(np.zeros((3, k)), np.eye(k)[[0, 1, 1]])[0] == pytest.approx(np.log(k), abs=1e-14)


def test_losses_reject_empty_selection_and_shape_mismatch():
    for fn in (nn.mse, nn.bce):
        with pytest.raises(ValueError, match="no valid"):
            fn(np.zeros(3), np.zeros(3), np.zeros(3))
        with pytest.raises(ValueError, match="shape"):
            fn(np.zeros(3), np.zeros(4))
    with pytest.raises(ValueError, match="no valid"):
        nn.cce(np.zeros((2, 3)), np.eye(3)[:2], np.zeros(2))


def test_bce_is_stable_for_large_logits():
    loss, g = nn.bce(np.array([800.0, -800.0]), np.array([1.0, 0.0]))
    assert loss == 0.0 and np.all(np.isfinite(g))


@pytest.mark.parametrize("seed", SEEDS)
def test_loss_gradients(seed):
    rng = np.random.default_rng(seed)
    mask = rng.random((4, 3)) < 0.7
    mask[0, 0] = True
    p, t = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    assert rel_err(nn.mse(p, t, mask)[1], numeric_grad(lambda: nn.mse(p, t, mask)[0], p)) < 1e-4
    tb = (rng.random((4, 3)) < 0.5).astype(float)
    assert rel_err(nn.bce(p, tb, mask)[1], numeric_grad(lambda: nn.bce(p, tb, mask)[0], p)) < 1e-4
    rows = mask[:, 0]
    tc = np.eye(3)[rng.integers(0, 3, 4)]
    assert rel_err(nn.cce(p, tc, rows)[1], numeric_grad(lambda: nn.cce(p, tc, rows)[0], p)) < 1e-4


@settings(max_examples=50)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**32 - 1))
def test_padding_never_changes_loss(extra_rows, extra_cols, seed):
    rng = np.random.default_rng(seed)
    p, t = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    mask = np.ones((3, 4), dtype=bool)
    base = nn.mse(p, t, mask)[0]
    shape = (3 + extra_rows, 4 + extra_cols)
    pp, tp = rng.normal(size=shape), rng.normal(size=shape)  # junk in the padding
    pp[:3, :4], tp[:3, :4] = p, t
    mp = np.zeros(shape, dtype=bool)
    mp[:3, :4] = True
    assert abs(nn.mse(pp, tp, mp)[0] - base) < 1e-12
    tb = (t > 0).astype(float)
    tbp = (tp > 0).astype(float)
    tbp[:3, :4] = tb
    assert abs(nn.bce(pp, tbp, mp)[0] - nn.bce(p, tb, mask)[0]) < 1e-12


# -- adam -------------------------------------------------------------------


def test_adam_zero_gradient_leaves_params():
    p = {"w": np.array([1.0, -2.0])}
    opt = nn.Adam(lr=0.1)
    opt.step(p, {"w": np.zeros(2)})
    np.testing.assert_array_equal(p["w"], [1.0, -2.0])
    assert opt.step_count == 1


def test_adam_first_step_hand_computed():
    lr, eps = 1e-3, 1e-8
    p = {"w": np.array([0.5])}
    nn.Adam(lr=lr, eps=eps).step(p, {"w": np.array([1.0])})
    # m_hat = 1, v_hat = 1 after bias correction
    assert p["w"][0] == pytest.approx(0.5 - lr / (1.0 + eps), abs=1e-15)


def test_adam_matches_textbook_recursion():
    rng = np.random.default_rng(5)
    gs = rng.normal(size=(6, 3))
    p = {"w": np.zeros(3)}
    opt = nn.Adam(lr=0.01)
    ref, m, v = np.zeros(3), np.zeros(3), np.zeros(3)
    for k, g in enumerate(gs, start=1):
        opt.step(p, {"w": g.copy()})
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 0.01 * (m / (1 - 0.9**k)) / (np.sqrt(v / (1 - 0.999**k)) + 1e-8)
    np.testing.assert_allclose(p["w"], ref, rtol=1e-12, atol=1e-15)


def test_adam_is_deterministic():
    def run():
        rng = np.random.default_rng(11)
        p = {"a": rng.normal(size=(3, 3))}
        opt = nn.Adam(lr=0.05)
        for _ in range(20):
            opt.step(p, {"a": np.sin(p["a"]) + rng.normal(size=(3, 3))})
        return p["a"]

    assert run().tobytes() == run().tobytes()


def test_adam_shape_mismatch():
    with pytest.raises(ValueError, match="shape"):
        nn.Adam().step({"w": np.zeros(2)}, {"w": np.zeros(3)})


def test_check_finite():
    nn.check_finite(np.ones(3), "x")
    with pytest.raises(nn.NonFiniteError, match="layer"):
        nn.check_finite(np.array([1.0, np.nan]), "layer")
