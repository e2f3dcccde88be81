import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from loocmi.datasets import Dataset, generate, loo_view
from loocmi.exceptions import ConfigError, DomainError
from loocmi.oracle import exact_loo_ridge
from loocmi.trainers import (
    LooPredictions,
    TrainConfig,
    default_damping,
    get_model,
    hessian,
    influence_loo,
    per_sample_gradient,
    per_sample_gradients,
    predict_all,
    prediction_jacobian,
    sgd_divergence,
    train,
    train_loo,
)

LOGISTIC = TrainConfig("logistic", lam=0.05, optimizer="full-batch-gd", lr=1.0, steps=200)
MLP = TrainConfig("mlp", hidden=4, lam=0.01, optimizer="full-batch-gd", lr=0.5, steps=100, init_seed=3)


def objective(model, w, X, y, N, lam):
    return model.data_loss(w, X, y).sum() / N + lam * np.dot(w, w)


def fd_grad(f, w, h=1e-6):
    g = np.empty_like(w)
    for k in range(w.size):
        e = np.zeros_like(w)
        e[k] = h
        g[k] = (f(w + e) - f(w - e)) / (2 * h)
    return g


def test_ridge_normal_equations():
    ds = generate("linear-regression", 0, 30, 4)
    w = train(ds, TrainConfig("ridge", lam=0.2))
    X, y = ds.features, ds.labels
    ref = np.linalg.solve(X.T @ X + 30 * 0.2 * np.eye(4), X.T @ y)
    np.testing.assert_allclose(w, ref, rtol=1e-10)
    # stationary point of the mean objective
    g = 2 * X.T @ (X @ w - y) / 30 + 2 * 0.2 * w
    assert np.linalg.norm(g) < 1e-10


def test_ridge_toy_one_sample():
    ds = Dataset([[1.0], [2.0]], [1.0, 2.0], task="regression", n_classes=1)
    assert train(loo_view(ds, 1), TrainConfig("ridge", lam=0.0))[0] == pytest.approx(1.0)


def test_gd_reaches_closed_form():
    ds = generate("linear-regression", 1, 40, 3)
    cf = train(ds, TrainConfig("ridge", lam=0.1))
    gd = train(ds, TrainConfig("ridge", lam=0.1, optimizer="full-batch-gd", lr=0.1, steps=2000))
    np.testing.assert_allclose(gd, cf, rtol=1e-8)
    # and on a leave-one-out view
    v = loo_view(ds, 7)
    np.testing.assert_allclose(
        train(v, TrainConfig("ridge", lam=0.1, optimizer="full-batch-gd", lr=0.1, steps=2000)),
        train(v, TrainConfig("ridge", lam=0.1)), rtol=1e-8)


@pytest.mark.parametrize("cfg,gen", [(LOGISTIC, "gaussian-blobs"), (MLP, "xor-blobs"),
                                     (TrainConfig("ridge", lam=0.1), "linear-regression")])
def test_gradient_matches_finite_differences(cfg, gen):
    ds = generate(gen, 0, 12, 3)
    model = get_model(cfg, 3, 2)
    rng = np.random.default_rng(0)
    w = 0.3 * rng.normal(size=model.n_params)
    y = ds.labels if model.is_classifier else ds.labels.astype(float)
    f = lambda v: objective(model, v, ds.features, y, ds.n, cfg.lam)
    g = per_sample_gradients(w, ds, cfg).sum(axis=0) / ds.n + 2 * cfg.lam * w
    np.testing.assert_allclose(g, fd_grad(f, w), rtol=1e-5, atol=1e-7)
    # single-sample helper agrees with the batch version
    np.testing.assert_allclose(per_sample_gradient(w, ds.features[2], y[2], cfg, include_penalty=False),
                               per_sample_gradients(w, ds, cfg)[2], rtol=1e-12)


def test_logistic_hessian_matches_finite_differences():
    ds = generate("gaussian-blobs", 0, 15, 2)
    model = get_model(LOGISTIC, 2, 2)
    w = np.linspace(-0.3, 0.4, model.n_params)
    H = hessian(w, ds, LOGISTIC)
    grad = lambda v: per_sample_gradients(v, ds, LOGISTIC).mean(axis=0) + 2 * LOGISTIC.lam * v
    num = np.column_stack([fd_grad(lambda u, k=k: grad(u)[k], w) for k in range(w.size)]).T
    np.testing.assert_allclose(H, 0.5 * (num + num.T), rtol=1e-5, atol=1e-7)


def test_pred_jacobian_matches_finite_differences():
    ds = generate("xor-blobs", 0, 5, 2)
    model = get_model(MLP, 2, 2)
    w = model.init(MLP)
    J = prediction_jacobian(w, ds.features, MLP)
    num = np.column_stack([
        fd_grad(lambda u, k=k: model.predict(u, ds.features).ravel()[k], w) for k in range(10)]).T
    np.testing.assert_allclose(J, num, rtol=1e-5, atol=1e-8)


def test_determinism_and_threads():
    ds = generate("gaussian-blobs", 2, 25, 3)
    cfg = TrainConfig("logistic", lam=0.05, optimizer="sgd", lr=0.5, steps=100, batch=4)
    a = train_loo(ds, cfg)
    b = train_loo(ds, cfg, threads=3)
    assert np.array_equal(a.weights, b.weights)
    assert np.array_equal(a.full_weights, train(ds, cfg))


def test_sgd_never_uses_removed_sample():
    # make sample 0 poisonous: if it were drawn, weights would blow up
    X = np.vstack([[1e6, 1e6], generate("gaussian-blobs", 0, 9, 2).features])
    y = np.array([1] + [i % 2 for i in range(9)])
    ds = Dataset(X, y)
    cfg = TrainConfig("logistic", lam=0.01, optimizer="sgd", lr=0.1, steps=50, batch=2)
    w = train(loo_view(ds, 0), cfg)
    assert np.all(np.abs(w) < 10)


def test_subset_loo():
    ds = generate("linear-regression", 0, 20, 3)
    loo = train_loo(ds, TrainConfig("ridge", lam=0.1), subset=[9, 2, 4])
    assert list(loo.indices) == [2, 4, 9]
    assert loo.is_subset
    assert np.all(np.isnan(loo.weights[0]))
    with pytest.raises(DomainError):
        train_loo(ds, TrainConfig("ridge"), subset=[1, 1])
    with pytest.raises(DomainError):
        train_loo(ds, TrainConfig("ridge"), subset=[25])


def test_predictions_shape_and_simplex():
    ds = generate("gaussian-blobs", 0, 10, 3)
    loo = train_loo(ds, LOGISTIC)
    P = predict_all(ds, loo)
    assert P.preds.shape == (10, 10, 2)
    np.testing.assert_allclose(P.preds.sum(axis=2), 1.0)
    with pytest.raises(DomainError):
        LooPredictions(np.full((2, 2, 2), 0.7), np.array([0, 1]), probabilities=True)


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig("logistic", optimizer="closed-form")
    with pytest.raises(ConfigError):
        TrainConfig("mlp", hidden=64, optimizer="full-batch-gd")
    with pytest.raises(ConfigError):
        TrainConfig("mlp", optimizer="sgd")
    with pytest.raises(ConfigError):
        TrainConfig("ridge", lam=-1.0)
    with pytest.raises(ConfigError):
        TrainConfig("ridge", optimizer="sgd", step_clip=0.0)
    with pytest.raises(ConfigError):
        train(generate("linear-regression", 0, 5, 2), LOGISTIC)


def test_influence_close_to_exact_and_scaling():
    ds = generate("linear-regression", 0, 200, 5)
    cfg = TrainConfig("ridge", lam=0.1)
    ex = exact_loo_ridge(ds, 0.1)
    g = influence_loo(ex.full_weights, ds, cfg, damping=0.0)
    d = ex.weights - ex.full_weights
    # for ridge the first-order shift misses exactly the leverage factor 1/(1 - h_i)
    A = ds.features.T @ ds.features + 200 * 0.1 * np.eye(5)
    h = np.einsum("ik,kl,il->i", ds.features, np.linalg.inv(A), ds.features)
    np.testing.assert_allclose(g, d * (1 - h)[:, None], rtol=1e-8, atol=1e-14)


def test_hessian_and_damping():
    ds = generate("linear-regression", 0, 50, 3)
    cfg = TrainConfig("ridge", lam=0.1)
    H = hessian(np.zeros(3), ds, cfg)
    ref = 2 * ds.features.T @ ds.features / 50 + 0.2 * np.eye(3)
    np.testing.assert_allclose(H, ref, rtol=1e-12)
    assert default_damping(H) == pytest.approx(1e-4 * np.trace(H) / 3)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 29), st.integers(0, 29))
def test_sgd_divergence_bounded(i, j):
    ds = generate("gaussian-blobs", 4, 30, 3)
    cfg = TrainConfig("logistic", lam=0.01, optimizer="sgd", lr=0.5, steps=20, step_clip=0.1)
    tr = sgd_divergence(ds, cfg, i, j)
    t = np.arange(1, 21)
    assert np.all(tr.delta <= 2 * t * 0.1 + 1e-12)
    assert tr.update_norms.max() <= 0.1 + 1e-12
    assert tr.bound == pytest.approx(2 * 20 * math.sqrt(0.01))
    if i == j:
        assert np.all(tr.delta == 0)


def test_sgd_divergence_needs_clip():
    ds = generate("gaussian-blobs", 0, 10, 2)
    with pytest.raises(ConfigError):
        sgd_divergence(ds, LOGISTIC, 0, 1)


def test_mlp_learns_xor():
    ds = generate("xor-blobs", 0, 80, 2)
    cfg = TrainConfig("mlp", hidden=8, lam=0.001, optimizer="full-batch-gd", lr=1.0, steps=600)
    w = train(ds, cfg)
    acc = np.mean(np.argmax(get_model(cfg, 2, 2).predict(w, ds.features), axis=1) == ds.labels)
    assert acc > 0.85
