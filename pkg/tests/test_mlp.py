import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from catapult import linear_model as lm
from catapult import mlp
from catapult.numerics import dense_top_eig, make_rng


def small_net(seed, widths, activation="relu", param="ntk", sigma_b=0.1):
    return mlp.init_mlp(make_rng(seed), widths, activation, param, math.sqrt(2.0), sigma_b)


def random_batch(seed, nb, d, k):
    rng = make_rng(seed + 1000)
    return mlp.Batch(rng.standard_normal((nb, d)), rng.standard_normal((nb, k)))


def fd_grad(model, batch, h=1e-5):
    g = np.zeros(model.num_params)
    base = model.theta.copy()
    for i in range(model.num_params):
        model.theta[i] = base[i] + h
        lp = mlp.mlp_loss(model, batch)
        model.theta[i] = base[i] - h
        lm_ = mlp.mlp_loss(model, batch)
        model.theta[i] = base[i]
        g[i] = (lp - lm_) / (2 * h)
    return g


@pytest.mark.parametrize("activation", mlp.ACTIVATIONS)
@pytest.mark.parametrize("param", mlp.PARAMETERIZATIONS)
def test_gradient_matches_finite_differences(activation, param):
    model = small_net(0, (5, 16, 16, 3), activation, param)
    batch = random_batch(0, 6, 5, 3)
    g = mlp.mlp_grad(model, batch)
    ref = fd_grad(model, batch)
    # coordinates whose gradient is at the finite-difference noise floor are
    # compared absolutely against that floor
    floor = 1e-9
    assert np.all(np.abs(g - ref) <= 1e-5 * np.maximum(np.abs(ref), floor / 1e-5))


def test_loss_normalization():
    model = small_net(1, (4, 8, 3), "relu")
    model.theta[:] = 0.0
    labels = np.array([0, 2, 1, 1, 0])
    Y = np.eye(3)[labels]
    assert mlp.mlp_loss(model, mlp.Batch(np.ones((5, 4)), Y)) == pytest.approx(1.0 / 6.0)


def test_loss_zero_at_fit_and_duplicate_invariance():
    model = small_net(2, (4, 8, 2), "tanh")
    X = make_rng(3).standard_normal((7, 4))
    Y = mlp.mlp_forward(model, X)
    fit = mlp.Batch(X, Y)
    assert mlp.mlp_loss(model, fit) == 0.0
    assert not np.any(mlp.mlp_grad(model, fit))
    batch = random_batch(4, 7, 4, 2)
    doubled = mlp.Batch(np.vstack([batch.X, batch.X]), np.vstack([batch.Y, batch.Y]))
    assert mlp.mlp_loss(model, doubled) == pytest.approx(mlp.mlp_loss(model, batch), rel=1e-14)
    assert mlp.ntk_top_eig(model, doubled.X)[0] == pytest.approx(
        mlp.ntk_top_eig(model, batch.X)[0], rel=1e-8)


def test_shape_errors():
    model = small_net(0, (4, 8, 2))
    with pytest.raises(mlp.ShapeMismatch):
        mlp.mlp_loss(model, mlp.Batch(np.ones((3, 4)), np.ones((3, 3))))
    with pytest.raises(mlp.ShapeMismatch):
        mlp.mlp_forward(model, np.ones((3, 5)))
    with pytest.raises(mlp.ShapeMismatch):
        mlp.mlp_jvp(model, np.ones((3, 4)), np.ones(model.num_params + 1))
    with pytest.raises(mlp.ShapeMismatch):
        mlp.Batch(np.ones((3, 4)), np.ones((2, 1)))
    with pytest.raises(ValueError):
        mlp.MlpModel((4, 2), activation="gelu")
    with pytest.raises(ValueError):
        mlp.OptimizerCfg(0.1, momentum=1.0)


@pytest.mark.parametrize("activation", mlp.ACTIVATIONS)
def test_jvp_matches_finite_differences(activation):
    model = small_net(5, (3, 12, 12, 2), activation)
    X = make_rng(6).standard_normal((4, 3))
    tangent = make_rng(7).standard_normal(model.num_params)
    h = 1e-6
    plus, minus = model.copy(), model.copy()
    plus.theta += h * tangent
    minus.theta -= h * tangent
    ref = (mlp.mlp_forward(plus, X) - mlp.mlp_forward(minus, X)) / (2 * h)
    got = mlp.mlp_jvp(model, X, tangent)
    assert np.max(np.abs(got - ref)) <= 1e-6 * max(1.0, np.max(np.abs(ref)))
    assert not np.any(mlp.mlp_jvp(model, X, np.zeros(model.num_params)))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31), activation=st.sampled_from(mlp.ACTIVATIONS),
       param=st.sampled_from(mlp.PARAMETERIZATIONS), k=st.integers(1, 4))
def test_adjoint_identity(seed, activation, param, k):
    model = small_net(seed, (3, 10, 7, k), activation, param)
    rng = make_rng(seed)
    X = rng.standard_normal((5, 3))
    c = rng.standard_normal((5, k))
    t = rng.standard_normal(model.num_params)
    lhs = mlp.mlp_vjp(model, X, c) @ t
    rhs = np.sum(c * mlp.mlp_jvp(model, X, t))
    assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))


@pytest.mark.parametrize("k", [1, 2, 10])
def test_matrix_free_ntk_matches_dense(k):
    model = small_net(8, (20, 64, 64, k), "relu")
    X = make_rng(9).standard_normal((32, 20))
    dense = mlp.ntk_dense(model, X)
    assert np.array_equal(dense, dense.T) or np.allclose(dense, dense.T, rtol=0, atol=1e-14)
    assert np.linalg.eigvalsh(dense).min() > -1e-10 * np.abs(dense).max()
    ref, _ = dense_top_eig(dense)
    lam, vec = mlp.ntk_top_eig(model, X)
    assert lam == pytest.approx(ref, rel=1e-6)
    assert np.linalg.norm(vec) == pytest.approx(1.0)


def identity_pair(seed, n, m, d):
    """An identity-activation MLP and the linear network it equals.

    The NTK parameterization scales the input layer by 1/sqrt(d), so feeding
    sqrt(d) X to the MLP reproduces f = v^T u x / sqrt(n) on X.
    """
    rng = make_rng(seed)
    model = mlp.init_mlp(rng, (d, n, 1), "identity", "ntk", 1.0, 0.0)
    data = lm.make_regression(make_rng(seed + 1), m, d)
    W1, W2 = [w for w, _ in model.layers()]
    params = lm.LinearNetParams(W1.T.copy(), W2[:, 0].copy())
    return model, params, data, data.X * math.sqrt(d)


def test_identity_mlp_kernel_matches_linear_model():
    model, params, data, Xm = identity_pair(0, 128, 8, 4)
    theta = lm.forward(params, data).theta
    assert np.allclose(mlp.ntk_dense(model, Xm), theta, rtol=1e-10, atol=1e-14)
    lam_lin = lm.top_kernel_eig(theta)[0]
    assert mlp.ntk_top_eig(model, Xm)[0] == pytest.approx(lam_lin, rel=1e-8)


def test_identity_mlp_gradient_matches_closed_form():
    model, params, data, Xm = identity_pair(1, 32, 6, 3)
    g = mlp.mlp_grad(model, mlp.Batch(Xm, data.Y))
    (gW1, _), (gW2, _) = model.split(g)
    st0 = lm.forward(params, data)
    n = params.n
    # dL/du = v zeta^T / sqrt(n), dL/dv = u zeta / sqrt(n)
    assert np.allclose(gW1.T, np.outer(params.v, st0.zeta) / math.sqrt(n), rtol=1e-10, atol=1e-15)
    assert np.allclose(gW2[:, 0], params.u @ st0.zeta / math.sqrt(n), rtol=1e-10, atol=1e-15)


def test_identity_mlp_trajectory_matches_linear_model():
    model, params, data, Xm = identity_pair(2, 64, 8, 4)
    lam0 = lm.top_kernel_eig(lm.forward(params, data).theta)[0]
    eta = 2.5 / lam0
    cfg = mlp.OptimizerCfg(eta)
    for _ in range(60):
        mlp.sgd_train(model, Xm, data.Y[:, None], cfg, steps=1, eig_every=0)
        params = lm.step_params_full(params, data, eta)
        ref = lm.forward(params, data).f
        got = mlp.mlp_forward(model, Xm)[:, 0]
        assert np.max(np.abs(got - ref)) <= 1e-10 * max(1.0, np.max(np.abs(ref)))


def test_sgd_records_and_order():
    model = small_net(3, (4, 16, 2), "tanh")
    rng = make_rng(4)
    X, Y = rng.standard_normal((12, 4)), rng.standard_normal((12, 2))
    trace = mlp.sgd_train(model.copy(), X, Y, mlp.OptimizerCfg(0.1), batch_size=5, steps=7,
                          eig_every=3)
    assert trace.steps == list(range(8))
    assert [r.lam is not None for r in trace.records] == [True, False, False, True, False, False,
                                                          True, True]
    # in-order minibatches: step 1 uses rows 5..9, step 2 rows 10, 11, 0, 1, 2
    m1 = model.copy()
    mlp.sgd_train(m1, X, Y, mlp.OptimizerCfg(0.1), batch_size=5, steps=2, eig_every=0)
    m2 = model.copy()
    for rows in ([0, 1, 2, 3, 4], [5, 6, 7, 8, 9]):
        m2.theta -= 0.1 * mlp.mlp_grad(m2, mlp.Batch(X[rows], Y[rows]))
    assert np.array_equal(m1.theta, m2.theta)


def test_sgd_momentum_and_l2_update():
    model = small_net(5, (3, 8, 1), "tanh")
    rng = make_rng(6)
    X, Y = rng.standard_normal((4, 3)), rng.standard_normal((4, 1))
    cfg = mlp.OptimizerCfg(0.05, momentum=0.9, l2=0.01)
    got = model.copy()
    mlp.sgd_train(got, X, Y, cfg, steps=3, eig_every=0)
    ref = model.copy()
    vel = np.zeros(ref.num_params)
    for _ in range(3):
        g = mlp.mlp_grad(ref, mlp.Batch(X, Y)) + 0.01 * ref.theta
        vel = 0.9 * vel + g
        ref.theta -= 0.05 * vel
    assert np.allclose(got.theta, ref.theta, rtol=0, atol=1e-15)


def test_sgd_divergence_flag():
    model = small_net(7, (3, 32, 1), "relu")
    X = make_rng(8).standard_normal((8, 3))
    Y = np.ones((8, 1))
    lam0 = mlp.ntk_top_eig(model, X)[0]
    trace = mlp.sgd_train(model, X, Y, mlp.OptimizerCfg(100.0 / lam0), steps=500, eig_every=0)
    assert trace.diverged and trace.records[-1].step < 500


@pytest.mark.parametrize("activation", ["identity", "tanh"])
def test_momentum_lazy_kernel_constant_smooth(activation):
    model = mlp.init_mlp(make_rng(0), (16, 512, 512, 1), activation, "ntk", 1.0, 0.0)
    X = make_rng(1).standard_normal((32, 16))
    Y = np.sign(X[:, :1])
    lam0 = mlp.ntk_top_eig(model, X)[0]
    trace = mlp.sgd_train(model, X, Y, mlp.OptimizerCfg(1.0 / lam0, momentum=0.5), steps=60,
                          eig_every=10)
    lams = [x for x in trace.lambdas if x is not None]
    assert max(abs(x - lam0) for x in lams) <= 0.1 * lam0


def test_standard_parameterization_init_scale():
    model = mlp.init_mlp(make_rng(0), (400, 300, 1), "relu", "standard", 2.0, 0.5)
    (W1, b1), _ = model.layers()
    assert W1.std() == pytest.approx(2.0 / math.sqrt(400), rel=0.02)
    assert b1.std() == pytest.approx(0.5, rel=0.15)


def test_measure_lambda_batches():
    model = small_net(0, (5, 32, 2), "relu")
    X = make_rng(1).standard_normal((40, 5))
    parts = [mlp.ntk_top_eig(model, p)[0] for p in np.array_split(X, 4)]
    assert mlp.measure_lambda(model, X, batches=4) == pytest.approx(np.mean(parts))


def test_dead_fraction():
    model = small_net(0, (2, 6, 1), "relu", sigma_b=0.0)
    (W1, b1), _ = model.layers()
    W1[:, :3] = -abs(W1[:, :3])
    X = np.abs(make_rng(1).standard_normal((10, 2)))
    assert mlp.dead_fraction(model, X) >= 0.5


def test_relu_simple_model_small_rate_monotone():
    t = mlp.relu_simple_model(256, 0.0, 0, 0)
    lam0 = t.meta["lambda0"]
    t = mlp.relu_simple_model(256, 0.01 / lam0, 200, 0)
    assert all(b <= a for a, b in zip(t.losses, t.losses[1:]))


@pytest.mark.parametrize("c", [3.0, 6.0, 8.0])
def test_relu_simple_model_catapult_trains(c):
    lam0 = mlp.relu_simple_model(1024, 0.0, 0, 0).meta["lambda0"]
    t = mlp.relu_simple_model(1024, c / lam0, 200, 0)
    assert not t.diverged and not t.meta["dead_end"]
    assert t.records[-1].loss < 1e-8
    assert max(t.losses) > t.losses[0]
    assert t.records[-1].lam < 2.0 * lam0 / c


def test_relu_simple_model_large_rate_collapses():
    outcomes = []
    for seed in (0, 1):
        lam0 = mlp.relu_simple_model(256, 0.0, 0, seed).meta["lambda0"]
        for c in (12.0, 16.0, 25.0):
            t = mlp.relu_simple_model(256, c / lam0, 300, seed)
            assert t.diverged or t.meta["dead_end"]
            if t.meta["dead_end"]:
                assert t.records[-1].aux["dead"] == 1.0
                assert t.records[-1].loss == 0.5
            outcomes.append(t.meta["dead_end"])
    assert any(outcomes)
