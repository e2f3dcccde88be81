import math

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from loocmi.datasets import generate
from loocmi.estimators import LooCMIBound, LooLogistic, LooMLP, LooRidge
from loocmi.trainers import TrainConfig, train_loo


def test_ridge_matches_functional_api():
    ds = generate("linear-regression", 0, 40, 3)
    est = LooRidge(lam=0.1).fit(ds.features, ds.labels)
    ref = train_loo(ds, TrainConfig("ridge", lam=0.1))
    assert np.array_equal(est.loo_weights_.weights, ref.weights)
    np.testing.assert_allclose(est.predict(ds.features), ds.features @ ref.full_weights)
    assert est.n_features_in_ == 3
    assert est.score(ds.features, ds.labels) > 0.8


def test_params_and_clone():
    est = LooLogistic(lam=0.2, steps=10)
    params = est.get_params()
    assert params["lam"] == 0.2 and params["steps"] == 10
    c = clone(est).set_params(lam=0.3)
    assert c.lam == 0.3 and est.lam == 0.2


def test_classifier_labels_and_proba():
    ds = generate("gaussian-blobs", 0, 40, 3)
    y = np.array(["neg", "pos"])[ds.labels]
    est = LooLogistic(loo=False).fit(ds.features, y)
    assert set(est.predict(ds.features)) <= {"neg", "pos"}
    np.testing.assert_allclose(est.predict_proba(ds.features).sum(axis=1), 1.0)
    assert not hasattr(est, "loo_weights_")


def test_not_fitted_and_bad_input():
    with pytest.raises(NotFittedError):
        LooRidge().predict(np.zeros((2, 2)))
    est = LooRidge(loo=False).fit(np.eye(3), [1.0, 2.0, 3.0])
    with pytest.raises(ValueError):
        est.predict(np.zeros((2, 5)))
    with pytest.raises(ValueError):
        LooRidge().fit(np.zeros((3, 2)), [1.0, 2.0])
    with pytest.raises(ValueError):
        LooLogistic().fit(np.zeros((3, 2)), [1, 1, 1])


def test_mlp_estimator():
    ds = generate("xor-blobs", 0, 40, 2)
    est = LooMLP(hidden=4, steps=30, subset=5).fit(ds.features, ds.labels)
    assert est.loo_weights_.indices.size == 5
    assert est.predict_proba(ds.features[:3]).shape == (3, 2)


def test_bound_estimator():
    ds = generate("gaussian-blobs", 0, 30, 3)
    b = LooCMIBound(LooLogistic(steps=50), sigma=0.1, weight_sigma=0.5, oracle_samples=1000)
    b.fit(ds.features, ds.labels)
    bd = b.bounds()
    assert 0 <= bd["loo_cmi"] <= bd["jensen"] + 1e-12
    assert 0 <= bd["floo_cmi"] <= math.log(30) + 1e-9
    assert b.oracle_["loo_mc"].value - 3 * b.oracle_["loo_mc"].std_err <= bd["loo_cmi"]
    assert b.predict(ds.features[:4]).shape == (4,)
    h = LooCMIBound(LooRidge(), weight_noise="hessian").fit(*_reg())
    assert h.cov_.kind == "full-inverse"
    with pytest.raises(ValueError):
        LooCMIBound(LooRidge(), weight_noise="bogus").fit(*_reg())


def _reg():
    ds = generate("linear-regression", 0, 20, 2)
    return ds.features, ds.labels
