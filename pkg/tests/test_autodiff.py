import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from premod import autodiff as ad
from premod.autodiff import Adam, GraphReused, PlateauSchedule, Tensor, TrainHyper


def numeric_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def check_op(build, *shapes, seed=0, positive=False):
    """Compare analytic gradients of sum(build(*tensors) * w) to central differences."""
    rng = np.random.default_rng(seed)
    arrays = [rng.uniform(0.5, 2.0, s) if positive else rng.normal(size=s) for s in shapes]
    out_shape = build(*[Tensor(a) for a in arrays]).shape
    w = rng.normal(size=out_shape)

    def value():
        with ad.no_grad():
            return float(np.sum(build(*[Tensor(a) for a in arrays]).data * w))

    ts = [Tensor(a, requires_grad=True) for a in arrays]
    ad.backward(ad.sum(ad.mul(build(*ts), Tensor(w))))
    for a, t in zip(arrays, ts):
        np.testing.assert_allclose(t.grad, numeric_grad(value, a), rtol=1e-5, atol=1e-7)


# ----------------------------------------------------------------- forward values


def test_softmax_uniform_row():
    np.testing.assert_allclose(ad.softmax(Tensor(np.ones((1, 4)))).data, [[0.25] * 4])


def test_sigmoid_zero():
    assert ad.sigmoid(Tensor(0.0)).item() == 0.5


def test_matmul_hand_product():
    a = Tensor([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
    b = Tensor([[7.0, 8.0], [9.0, 10.0], [11.0, 12.0]])
    np.testing.assert_array_equal(ad.matmul(a, b).data, [[58.0, 64.0], [139.0, 154.0]])


def test_matmul_shape_mismatch():
    with pytest.raises(ad.ShapeMismatch):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_softmax_rows_sum_to_one():
    x = np.random.default_rng(1).normal(scale=20, size=(5, 7))
    s = ad.softmax(Tensor(x)).data
    assert np.max(np.abs(s.sum(axis=-1) - 1)) <= 1e-12


def test_layer_norm_moments():
    x = np.random.default_rng(2).normal(3.0, 5.0, size=(6, 16))
    y = ad.layer_norm(Tensor(x), Tensor(np.ones(16)), Tensor(np.zeros(16))).data
    assert np.max(np.abs(y.mean(axis=-1))) <= 1e-10
    assert np.max(np.abs(y.var(axis=-1) - 1)) <= 1e-6


def test_sigmoid_is_stable_for_large_inputs():
    with np.errstate(over="raise", invalid="raise"):
        out = ad.sigmoid(Tensor([-800.0, 800.0])).data
    assert out[0] == 0.0 and out[1] == 1.0


# ----------------------------------------------------------------- gradients


def test_square_derivative():
    x = Tensor(3.0, requires_grad=True)
    ad.backward(ad.mul(x, x))
    assert x.grad == 6.0


@pytest.mark.parametrize("name,build,shapes,positive", [
    ("add_broadcast", ad.add, [(3, 4), (4,)], False),
    ("sub", ad.sub, [(3, 4), (3, 4)], False),
    ("mul_broadcast", ad.mul, [(2, 3, 4), (3, 1)], False),
    ("scale", lambda a: ad.scale(a, -2.5), [(3, 2)], False),
    ("matmul_2d", ad.matmul, [(3, 4), (4, 5)], False),
    ("matmul_batched", ad.matmul, [(2, 3, 4), (2, 4, 5)], False),
    ("matmul_nd_by_2d", ad.matmul, [(2, 3, 4), (4, 5)], False),
    ("pow", lambda a: ad.pow_const(a, 1.7), [(4,)], True),
    ("log", ad.log, [(4,)], True),
    ("exp", ad.exp, [(3, 2)], False),
    ("relu", ad.relu, [(5, 3)], False),
    ("tanh", ad.tanh, [(5,)], False),
    ("sigmoid", ad.sigmoid, [(5,)], False),
    ("softmax_last", ad.softmax, [(3, 5)], False),
    ("softmax_axis1", lambda a: ad.softmax(a, axis=1), [(2, 4, 3)], False),
    ("layer_norm", ad.layer_norm, [(3, 6), (6,), (6,)], False),
    ("concat", lambda a, b: ad.concat([a, b], axis=-1), [(2, 3), (2, 2)], False),
    ("mean_axis", lambda a: ad.mean(a, axis=1), [(3, 4, 2)], False),
    ("sum_keepdims", lambda a: ad.sum(a, axis=0, keepdims=True), [(3, 4)], False),
    ("reshape", lambda a: ad.reshape(a, (6, 2)), [(3, 4)], False),
    ("transpose", lambda a: ad.transpose(a, (2, 0, 1)), [(2, 3, 4)], False),
    ("getitem", lambda a: ad.getitem(a, (slice(None), 0)), [(3, 4)], False),
    ("clip", lambda a: ad.clip(a, -0.5, 0.5), [(6,)], False),
])
def test_op_gradients(name, build, shapes, positive):
    check_op(build, *shapes, positive=positive)


def test_shared_input_accumulates():
    x = Tensor([1.5, -2.0], requires_grad=True)
    ad.backward(ad.sum(ad.add(ad.mul(x, x), x)))
    np.testing.assert_allclose(x.grad, 2 * x.data + 1)


def test_self_add_and_sub():
    x = Tensor([1.0, 2.0], requires_grad=True)
    ad.backward(ad.sum(ad.add(x, x)))
    np.testing.assert_array_equal(x.grad, [2.0, 2.0])
    y = Tensor([1.0, 2.0], requires_grad=True)
    ad.backward(ad.sum(ad.sub(y, y)))
    np.testing.assert_array_equal(y.grad, [0.0, 0.0])


def test_backward_twice_raises():
    x = Tensor(2.0, requires_grad=True)
    loss = ad.mul(x, x)
    ad.backward(loss)
    with pytest.raises(GraphReused):
        ad.backward(loss)


def test_no_grad_records_nothing():
    x = Tensor(2.0, requires_grad=True)
    with ad.no_grad():
        y = ad.mul(x, x)
    assert not y.requires_grad


def test_dropout_eval_is_identity_and_train_rescales():
    x = Tensor(np.ones((200, 50)))
    assert ad.dropout(x, 0.1, None) is x
    y = ad.dropout(x, 0.1, np.random.default_rng(0)).data
    assert set(np.unique(y)) <= {0.0, 1.0 / 0.9}
    assert abs(y.mean() - 1.0) < 0.02


# ----------------------------------------------------------------- focal loss


def test_focal_closed_form_positive():
    v = ad.focal_loss(Tensor([0.9]), np.array([1.0]), 2.0, 0.25).item()
    assert math.isclose(v, 0.25 * 0.1 ** 2 * -math.log(0.9), rel_tol=1e-12)
    assert abs(v - 2.634e-4) < 5e-8


def test_focal_closed_form_negative():
    v = ad.focal_loss(Tensor([0.5]), np.array([0.0]), 2.0, 0.25).item()
    assert math.isclose(v, 0.75 * 0.25 * math.log(2), rel_tol=1e-12)
    assert abs(v - 0.1300) < 5e-5


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0.001, 0.999), min_size=1, max_size=20), st.data())
def test_focal_gamma0_is_half_bce(ps, data):
    y = np.array(data.draw(st.lists(st.integers(0, 1), min_size=len(ps), max_size=len(ps))), float)
    p = Tensor(ps)
    fl = ad.focal_loss(p, y, gamma=0.0, alpha=0.5).item()
    bce = ad.bce_loss(Tensor(ps), y).item()
    assert math.isclose(fl, 0.5 * bce, rel_tol=1e-12, abs_tol=1e-15)


def test_focal_nonnegative_and_vanishes_at_certainty():
    p = Tensor([1 - 1e-9, 1e-9])
    y = np.array([1.0, 0.0])
    v = ad.focal_loss(p, y).item()
    assert 0 <= v < 1e-20
    assert ad.focal_loss(Tensor([0.0, 1.0]), np.array([1.0, 0.0])).item() > 0


def test_focal_gradient():
    y = np.array([1.0, 0.0, 1.0, 0.0])
    p0 = np.array([0.2, 0.3, 0.7, 0.9])
    p = Tensor(p0.copy(), requires_grad=True)
    ad.backward(ad.focal_loss(p, y))

    def value():
        return ad.focal_loss(Tensor(p0), y).item()
    np.testing.assert_allclose(p.grad, numeric_grad(value, p0), rtol=1e-6)


# ----------------------------------------------------------------- optimiser


def test_adam_converges_on_quadratic():
    w = Tensor(np.array([5.0]), requires_grad=True)
    opt = Adam([w], lr=0.1)
    for _ in range(500):
        opt.zero_grad()
        ad.backward(ad.sum(ad.pow_const(ad.sub(w, Tensor(2.0)), 2)))
        opt.step()
    assert abs(w.data[0] - 2.0) < 1e-6


def test_adam_first_step_is_lr_sized():
    w = Tensor(np.array([1.0, -1.0]), requires_grad=True)
    opt = Adam([w], lr=0.01)
    ad.backward(ad.sum(ad.mul(w, Tensor([3.0, -0.2]))))
    opt.step()
    # bias-corrected first step moves each coordinate by lr * sign(grad)
    np.testing.assert_allclose(w.data, [0.99, -0.99], rtol=1e-6)


def test_plateau_divides_after_two_stagnant_epochs():
    opt = Adam([Tensor(np.zeros(1), requires_grad=True)], lr=2e-4)
    sched = PlateauSchedule(opt, patience=2, factor=5)
    assert sched.update(1.0) == 2e-4
    assert sched.update(1.0) == 2e-4
    assert math.isclose(sched.update(1.1), 4e-5)


def test_plateau_keeps_lr_while_improving():
    opt = Adam([Tensor(np.zeros(1), requires_grad=True)], lr=2e-4)
    sched = PlateauSchedule(opt)
    for v in (1.0, 0.9, 0.8, 0.7, 0.6):
        assert sched.update(v) == 2e-4


@pytest.mark.parametrize("bad", [{"alpha": 0.0}, {"alpha": 1.0}, {"lr0": 0.0}, {"batch_size": 0},
                                 {"loss": "hinge"}, {"gamma": -1.0}])
def test_train_hyper_validation(bad):
    with pytest.raises(ValueError):
        TrainHyper(**bad)
