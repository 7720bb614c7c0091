import numpy as np
import pytest

from catapult import mlp
from catapult.linearize import (kernel_change, linearize_at, relative_kernel_change,
                                train_tangent)
from catapult.numerics import make_rng


def setup(seed=0, widths=(6, 64, 64, 2), activation="relu", nb=16):
    model = mlp.init_mlp(make_rng(seed), widths, activation, "ntk", np.sqrt(2.0), 0.1)
    rng = make_rng(seed + 1)
    X = rng.standard_normal((nb, widths[0]))
    Y = rng.standard_normal((nb, widths[-1]))
    return model, X, Y


def test_fresh_tangent_equals_model():
    model, X, _ = setup()
    tm = linearize_at(model, {"train": X})
    assert np.array_equal(tm.predict("train"), mlp.mlp_forward(model, X))
    assert np.array_equal(tm.predict_inputs(X), mlp.mlp_forward(model, X))
    # the anchor is a copy: training the original leaves the tangent alone
    model.theta += 1.0
    assert not np.array_equal(tm.predict("train"), mlp.mlp_forward(model, X))


def test_tangent_is_linear_in_delta():
    model, X, _ = setup(1)
    tm = linearize_at(model, {"train": X})
    rng = make_rng(2)
    a, b = rng.standard_normal(model.num_params), rng.standard_normal(model.num_params)
    base = tm.base_outputs("train")
    outs = []
    for delta in (a, b, 2.0 * a - 3.0 * b):
        tm.delta = delta
        outs.append(tm.predict("train") - base)
    assert np.allclose(outs[2], 2.0 * outs[0] - 3.0 * outs[1], rtol=1e-10, atol=1e-12)


def test_tangent_loss_gradient_matches_finite_differences():
    model, X, Y = setup(3, widths=(4, 12, 12, 2), nb=5)
    tm = linearize_at(model, {"train": X})
    tm.delta = 0.01 * make_rng(4).standard_normal(model.num_params)
    _, grad = tm.loss_grad("train", Y)
    h = 1e-5
    for i in range(0, model.num_params, 7):
        tm.delta[i] += h
        lp, _ = tm.loss_grad("train", Y)
        tm.delta[i] -= 2 * h
        lm_, _ = tm.loss_grad("train", Y)
        tm.delta[i] += h
        fd = (lp - lm_) / (2 * h)
        assert abs(fd - grad[i]) <= 1e-6 * max(abs(fd), 1e-4)


@pytest.mark.parametrize("activation", ["relu", "tanh"])
@pytest.mark.parametrize("c", [0.5, 1.5])
def test_constant_kernel_recursion(activation, c):
    model, X, Y = setup(5, activation=activation)
    theta0 = mlp.ntk_dense(model, X)
    lam0 = np.linalg.eigvalsh(theta0)[-1]
    eta = c / lam0
    tm = linearize_at(model, {"train": X})
    errors = []
    train_tangent(tm, X, Y, eta, 200,
                  callback=lambda t, _tm, out: errors.append((out - Y).ravel()) and False)
    e = (mlp.mlp_forward(model, X) - Y).ravel()
    step = np.eye(theta0.shape[0]) - eta * theta0
    ref = []
    for _ in range(len(errors)):
        ref.append(e)
        e = step @ e
    ref = np.array(ref)
    got = np.array(errors)
    assert np.max(np.abs(got - ref)) <= 1e-8 * np.max(np.abs(ref))


def test_zero_rate_is_constant():
    model, X, Y = setup(6)
    tm = linearize_at(model)
    trace = train_tangent(tm, X, Y, 0.0, 20)
    assert len(set(trace.losses)) == 1
    assert not np.any(tm.delta)


def test_above_critical_rate_diverges():
    model, X, Y = setup(7)
    lam0 = mlp.ntk_top_eig(model, X)[0]
    tm = linearize_at(model)
    trace = train_tangent(tm, X, Y, 2.5 / lam0, 5000)
    assert trace.diverged
    tail = trace.losses[-20:]
    assert all(b > a for a, b in zip(tail, tail[1:]))


def test_kernel_change_zero_interval_and_metric():
    model, X, Y = setup(8)
    assert kernel_change(model, X, Y, 0.1, 5, 5) == 0.0
    with pytest.raises(ValueError):
        kernel_change(model, X, Y, 0.1, 5, 3)
    a = np.eye(3)
    assert relative_kernel_change(a, 2 * a) == pytest.approx(1.0)


def test_kernel_change_catapult_exceeds_lazy():
    model, X, Y = setup(9, widths=(6, 256, 1), nb=16)
    Y = np.sign(X[:, :1])
    lam0 = mlp.ntk_top_eig(model, X)[0]
    lazy = kernel_change(model, X, Y, 1.0 / lam0, 0, 200)
    cat = kernel_change(model, X, Y, 3.0 / lam0, 0, 200)
    assert cat > 0.1 > lazy
