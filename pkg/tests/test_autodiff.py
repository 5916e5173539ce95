"""Gradient and contract tests for the tensor engine and optimizer."""

import numpy as np
import pytest

from multiseg3d import autodiff as ad
from multiseg3d.errors import ContractError, NumericError, ShapeError
from multiseg3d.optim import AdamWState, adamw_step, polynomial_lr
from multiseg3d.rng import make_rng

from util import check_op_grad, fd_grad

N_TRIALS = 100  # random small tensors per primitive


def _rand(rng, *shape):
    return ad.parameter(rng.normal(size=shape))


# ---------------------------------------------------------------------------
# per-primitive gradient checks vs central finite differences


@pytest.mark.parametrize("op_name", [
    "add", "add_broadcast", "mul", "mul_broadcast", "matmul", "transpose",
    "reshape", "concat0", "concat1", "gather_rows", "slice_cols",
    "take_along_rows", "sum_all", "sum_axis0", "mean_all", "mean_axis1",
    "relu", "sigmoid", "exp", "log", "softmax", "layer_norm",
    "l2_normalize", "bce_logits", "dice_rows", "ce_logits",
    "neighbor_mean", "segment_mean",
])
def test_primitive_gradients(op_name):
    for trial in range(N_TRIALS):
        rng = make_rng(11, op_name, trial)
        if op_name == "add":
            a, b = _rand(rng, 3, 4), _rand(rng, 3, 4)
            w = rng_w(rng, 3, 4)
            check_op_grad(lambda: ad.tsum(ad.mul(ad.add(a, b), w)), [a, b])
        elif op_name == "add_broadcast":
            a, b = _rand(rng, 3, 4), _rand(rng, 4)
            w = rng_w(rng, 3, 4)
            check_op_grad(lambda: ad.tsum(ad.mul(ad.add(a, b), w)), [a, b])
        elif op_name == "mul":
            a, b = _rand(rng, 3, 4), _rand(rng, 3, 4)
            check_op_grad(lambda: ad.tsum(ad.mul(a, b)), [a, b])
        elif op_name == "mul_broadcast":
            a, b = _rand(rng, 3, 4), _rand(rng, 1, 4)
            check_op_grad(lambda: ad.tsum(ad.mul(a, b)), [a, b])
        elif op_name == "matmul":
            a, b = _rand(rng, 3, 4), _rand(rng, 4, 2)
            w = rng_w(rng, 3, 2)
            check_op_grad(lambda: ad.tsum(ad.mul(ad.matmul(a, b), w)), [a, b])
        elif op_name == "transpose":
            a = _rand(rng, 3, 4)
            w = rng_w(rng, 4, 3)
            check_op_grad(lambda: ad.tsum(ad.mul(ad.transpose(a), w)), [a])
        elif op_name == "reshape":
            a = _rand(rng, 3, 4)
            w = rng_w(rng, 12)
            check_op_grad(lambda: ad.tsum(ad.mul(ad.reshape(a, (12,)), w)), [a])
        elif op_name == "concat0":
            a, b = _rand(rng, 2, 3), _rand(rng, 4, 3)
            w = rng_w(rng, 6, 3)
            check_op_grad(lambda: ad.tsum(ad.mul(ad.concat([a, b], axis=0), w)), [a, b])
        elif op_name == "concat1":
            a, b = _rand(rng, 3, 2), _rand(rng, 3, 5)
            w = rng_w(rng, 3, 7)
            check_op_grad(lambda: ad.tsum(ad.mul(ad.concat([a, b], axis=1), w)), [a, b])
        elif op_name == "gather_rows":
            a = _rand(rng, 5, 3)
            idx = rng.integers(0, 5, size=4)  # duplicates allowed
            w = rng_w(rng, 4, 3)
            check_op_grad(lambda: ad.tsum(ad.mul(ad.gather_rows(a, idx), w)), [a])
        elif op_name == "slice_cols":
            a = _rand(rng, 3, 6)
            w = rng_w(rng, 3, 3)
            check_op_grad(lambda: ad.tsum(ad.mul(ad.slice_cols(a, 1, 4), w)), [a])
        elif op_name == "take_along_rows":
            a = _rand(rng, 4, 6)
            idx = np.stack([rng.permutation(6)[:3] for _ in range(4)])
            w = rng_w(rng, 4, 3)
            check_op_grad(lambda: ad.tsum(ad.mul(ad.take_along_rows(a, idx), w)), [a])
        elif op_name == "sum_all":
            a = _rand(rng, 3, 4)
            check_op_grad(lambda: ad.tsum(a), [a])
        elif op_name == "sum_axis0":
            a = _rand(rng, 3, 4)
            w = rng_w(rng, 4)
            check_op_grad(lambda: ad.tsum(ad.mul(ad.tsum(a, axis=0), w)), [a])
        elif op_name == "mean_all":
            a = _rand(rng, 3, 4)
            check_op_grad(lambda: ad.tmean(a), [a])
        elif op_name == "mean_axis1":
            a = _rand(rng, 3, 4)
            w = rng_w(rng, 3)
            check_op_grad(lambda: ad.tsum(ad.mul(ad.tmean(a, axis=1), w)), [a])
        elif op_name == "relu":
            a = ad.parameter(rng.normal(size=(3, 4)) + np.sign(rng.normal(size=(3, 4))) * 0.05)
            w = rng_w(rng, 3, 4)
            check_op_grad(lambda: ad.tsum(ad.mul(ad.relu(a), w)), [a])
        elif op_name == "sigmoid":
            a = _rand(rng, 3, 4)
            w = rng_w(rng, 3, 4)
            check_op_grad(lambda: ad.tsum(ad.mul(ad.sigmoid(a), w)), [a])
        elif op_name == "exp":
            a = _rand(rng, 3, 4)
            check_op_grad(lambda: ad.tsum(ad.texp(a)), [a])
        elif op_name == "log":
            a = ad.parameter(rng.uniform(0.3, 3.0, size=(3, 4)))
            check_op_grad(lambda: ad.tsum(ad.tlog(a)), [a])
        elif op_name == "softmax":
            a = _rand(rng, 3, 5)
            w = rng_w(rng, 3, 5)
            check_op_grad(lambda: ad.tsum(ad.mul(ad.softmax_rows(a), w)), [a])
        elif op_name == "layer_norm":
            a = _rand(rng, 3, 6)
            g = ad.parameter(rng.uniform(0.5, 1.5, size=6))
            b = _rand(rng, 6)
            w = rng_w(rng, 3, 6)
            check_op_grad(lambda: ad.tsum(ad.mul(ad.layer_norm(a, g, b), w)), [a, g, b])
        elif op_name == "l2_normalize":
            a = ad.parameter(rng.normal(size=(3, 5)) + 0.5)
            w = rng_w(rng, 3, 5)
            check_op_grad(lambda: ad.tsum(ad.mul(ad.l2_normalize_rows(a), w)), [a])
        elif op_name == "bce_logits":
            a = _rand(rng, 3, 4)
            t = rng.uniform(0, 1, size=(3, 4))
            check_op_grad(lambda: ad.tmean(ad.bce_logits(a, t)), [a])
        elif op_name == "dice_rows":
            a = _rand(rng, 3, 6)
            t = (rng.uniform(size=(3, 6)) > 0.4).astype(float)
            t[:, 0] = 1.0  # keep every target non-empty
            check_op_grad(lambda: ad.tmean(ad.dice_rows(ad.sigmoid(a), t)), [a])
        elif op_name == "ce_logits":
            a = _rand(rng, 4, 5)
            t = rng.integers(0, 5, size=4)
            check_op_grad(lambda: ad.tmean(ad.ce_logits(a, t)), [a])
        elif op_name == "neighbor_mean":
            a = _rand(rng, 6, 3)
            nbr = rng.integers(0, 6, size=(6, 3))
            w = rng_w(rng, 6, 3)
            check_op_grad(lambda: ad.tsum(ad.mul(ad.neighbor_mean(a, nbr), w)), [a])
        elif op_name == "segment_mean":
            a = _rand(rng, 8, 3)
            seg = np.array([0, 0, 1, 2, 2, 2, 1, 0])
            w = rng_w(rng, 3, 3)
            check_op_grad(lambda: ad.tsum(ad.mul(ad.segment_mean(a, seg, 3), w)), [a])
        else:
            raise AssertionError(op_name)


def rng_w(rng, *shape):
    """Constant mixing weights so sums exercise every output entry."""
    return ad.Tensor(rng.normal(size=shape))


# ---------------------------------------------------------------------------
# documented examples


def test_softmax_symmetry():
    out = ad.softmax_rows(ad.Tensor([0.0, 0.0]))
    np.testing.assert_array_equal(out.data, [0.5, 0.5])


def test_softmax_rows_sum_to_one():
    rng = make_rng(2)
    x = ad.Tensor(rng.normal(size=(50, 7)) * 30)
    p = ad.softmax_rows(x).data
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)


def test_matmul_identity():
    rng = make_rng(3)
    a = ad.Tensor(rng.normal(size=(4, 4)))
    out = ad.matmul(a, ad.Tensor(np.eye(4)))
    np.testing.assert_array_equal(out.data, a.data)


def test_sigmoid_of_zero():
    assert ad.sigmoid(ad.Tensor(np.zeros(1))).data[0] == 0.5


def test_backward_square():
    x = ad.parameter(np.array(3.0))
    loss = ad.mul(x, x)
    ad.backward(loss)
    assert x.grad == pytest.approx(6.0)


def test_backward_sigmoid_sum():
    x = ad.parameter(np.zeros((2, 3)))
    loss = ad.tsum(ad.sigmoid(x))
    ad.backward(loss)
    np.testing.assert_allclose(x.grad, 0.25)


def test_backward_deterministic():
    rng = make_rng(4)
    a = ad.parameter(rng.normal(size=(5, 5)))
    b = ad.parameter(rng.normal(size=(5, 5)))

    def build():
        h = ad.relu(ad.matmul(a, b))
        return ad.tmean(ad.mul(ad.softmax_rows(h), ad.sigmoid(ad.add(a, b))))

    loss = build()
    g1 = ad.grads_of(loss, [a, b])
    g2 = ad.grads_of(loss, [a, b])  # same tape, re-walked
    for x, y in zip(g1, g2):
        assert np.array_equal(x, y)


def test_unreached_leaf_gets_zero_grad():
    a = ad.parameter(np.ones((2, 2)))
    unused = ad.parameter(np.ones(3))
    g = ad.grads_of(ad.tsum(a), [a, unused])
    np.testing.assert_array_equal(g[1], np.zeros(3))


def test_backward_rejects_non_scalar():
    a = ad.parameter(np.ones((2, 2)))
    with pytest.raises(ContractError):
        ad.backward(ad.add(a, a))


def test_shape_error_names_op():
    with pytest.raises(ShapeError, match="matmul"):
        ad.matmul(ad.Tensor(np.ones((2, 3))), ad.Tensor(np.ones((4, 2))))


def test_nonfinite_output_raises():
    with pytest.raises(NumericError):
        ad.texp(ad.Tensor(np.array([1e4])))


def test_detach_cuts_gradient():
    a = ad.parameter(np.ones(4) * 0.3)
    loss = ad.tsum(ad.mul(ad.sigmoid(a).detach(), a))
    g = ad.grads_of(loss, [a])[0]
    np.testing.assert_allclose(g, 1.0 / (1.0 + np.exp(-0.3)))


# ---------------------------------------------------------------------------
# optimizer


def test_schedule_endpoints():
    assert polynomial_lr(0, 1e-4, 1000) == pytest.approx(1e-4)
    assert polynomial_lr(1000, 1e-4, 1000) == 0.0


def test_zero_gradient_step_is_pure_decay():
    rng = make_rng(5)
    p = ad.parameter(rng.normal(size=(3, 2)))
    before = p.data.copy()
    state = AdamWState(lr0=1e-2, weight_decay=0.1, total_steps=10)
    adamw_step(state, [p], [np.zeros_like(p.data)])
    lr = polynomial_lr(0, 1e-2, 10)
    np.testing.assert_array_equal(p.data, before * (1.0 - lr * 0.1))


def test_adamw_rejects_nonfinite_gradient():
    p = ad.parameter(np.ones(2))
    state = AdamWState(lr0=1e-3, weight_decay=0.0, total_steps=5)
    with pytest.raises(NumericError, match="w_late"):
        adamw_step(state, [p], [np.array([np.nan, 0.0])], names=["w_late"])


def test_adamw_descends_quadratic():
    p = ad.parameter(np.array([4.0, -3.0]))
    state = AdamWState(lr0=0.1, weight_decay=0.0, total_steps=500)
    for _ in range(400):
        g = 2.0 * p.data
        adamw_step(state, [p], [g])
    assert np.all(np.abs(p.data) < 0.05)


def test_fd_oracle_sanity():
    # the oracle itself must recover a known gradient
    x = ad.parameter(np.array([2.0]))
    g = fd_grad(lambda: float(x.data[0] ** 3), [x])[0]
    assert g[0] == pytest.approx(12.0, rel=1e-6)
