"""scikit-learn style wrappers around the leave-one-out trainers and bounds."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, RegressorMixin, clone
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import bounds as B
from .datasets import Dataset
from .numerics import CovSpec
from .oracle import mc_cmi, mc_floo_cmi
from .trainers import TrainConfig, default_damping, get_model, hessian, predict_all, train, train_loo

__all__ = ["LooRidge", "LooLogistic", "LooMLP", "LooCMIBound"]


class _LooEstimator(BaseEstimator):
    """Shared fit logic: full-data weights plus, optionally, every LOO retrain."""

    _model = "ridge"
    _task = "regression"

    def _config(self) -> TrainConfig:
        return TrainConfig(model=self._model, lam=self.lam, hidden=getattr(self, "hidden", 16),
                           optimizer=self.optimizer, lr=self.lr, steps=self.steps,
                           batch=getattr(self, "batch", 1), step_clip=self.step_clip,
                           momentum=getattr(self, "momentum", 0.0), init_seed=self.random_state,
                           sgd_order_seed=self.random_state)

    def _dataset(self, X, y) -> Dataset:
        if self._task == "classification":
            self.classes_, codes = np.unique(y, return_inverse=True)
            if self.classes_.size < 2:
                raise ValueError("need at least two classes")
            return Dataset(X, codes, task="classification", n_classes=int(self.classes_.size))
        return Dataset(X, np.asarray(y, dtype=np.float64), task="regression", n_classes=1)

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64, y_numeric=self._task == "regression")
        self.n_features_in_ = X.shape[1]
        ds = self._dataset(X, y)
        self.config_ = self._config()
        if self.loo:
            subset = None
            if self.subset is not None:
                rng = np.random.default_rng(self.random_state)
                subset = np.sort(rng.choice(ds.n, size=int(self.subset), replace=False))
            self.loo_weights_ = train_loo(ds, self.config_, subset, threads=self.n_jobs)
            self.loo_predictions_ = predict_all(ds, self.loo_weights_)
            self.coef_ = self.loo_weights_.full_weights
        else:
            self.coef_ = train(ds, self.config_)
        self.dataset_ = ds
        return self

    def _outputs(self, X):
        check_is_fitted(self, "coef_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        n_classes = max(self.dataset_.n_classes, 2)
        return get_model(self.config_, X.shape[1], n_classes).predict(self.coef_, X)


class LooRidge(RegressorMixin, _LooEstimator):
    """Ridge regression without intercept, minimizing mean squared error + lam ||w||^2."""

    def __init__(self, lam=0.1, optimizer="closed-form", lr=0.1, steps=200, batch=1,
                 step_clip=None, momentum=0.0, loo=True, subset=None, random_state=0, n_jobs=1):
        self.lam = lam
        self.optimizer = optimizer
        self.lr = lr
        self.steps = steps
        self.batch = batch
        self.step_clip = step_clip
        self.momentum = momentum
        self.loo = loo
        self.subset = subset
        self.random_state = random_state
        self.n_jobs = n_jobs

    def predict(self, X):
        return self._outputs(X)[:, 0]


class _LooClassifier(ClassifierMixin, _LooEstimator):
    _task = "classification"

    def predict_proba(self, X):
        return self._outputs(X)

    def predict(self, X):
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]


class LooLogistic(_LooClassifier):
    """Multinomial logistic regression trained by (stochastic) gradient descent."""

    _model = "logistic"

    def __init__(self, lam=0.05, optimizer="full-batch-gd", lr=1.0, steps=200, batch=1,
                 step_clip=None, momentum=0.0, loo=True, subset=None, random_state=0, n_jobs=1):
        self.lam = lam
        self.optimizer = optimizer
        self.lr = lr
        self.steps = steps
        self.batch = batch
        self.step_clip = step_clip
        self.momentum = momentum
        self.loo = loo
        self.subset = subset
        self.random_state = random_state
        self.n_jobs = n_jobs


class LooMLP(_LooClassifier):
    """One-hidden-layer tanh network, full-batch gradient descent."""

    _model = "mlp"

    def __init__(self, hidden=16, lam=0.01, lr=0.5, steps=300, step_clip=None,
                 loo=True, subset=None, random_state=0, n_jobs=1):
        self.hidden = hidden
        self.lam = lam
        self.lr = lr
        self.steps = steps
        self.step_clip = step_clip
        self.loo = loo
        self.subset = subset
        self.random_state = random_state
        self.n_jobs = n_jobs

    @property
    def optimizer(self):
        return "full-batch-gd"


class LooCMIBound(BaseEstimator):
    """Fit a LOO estimator and expose the CMI upper bounds as fitted attributes.

    Parameters
    ----------
    estimator : LooRidge, LooLogistic or LooMLP
        Cloned and fitted with ``loo=True``.
    sigma : float
        Isotropic prediction noise.
    weight_noise : {"isotropic", "hessian"}
        Weight noise covariance: ``weight_sigma^2 I``, or the inverse of the
        damped Hessian at the full-data weights scaled by ``weight_sigma^2``.
    oracle_samples : int or None
        If set, Monte-Carlo estimates are stored in ``oracle_``.

    Attributes
    ----------
    loo_cmi_, floo_cmi_, jensen_upper_ : float
        Upper bounds in nats.
    gen_bound_weights_, gen_bound_predictions_ : float
    """

    def __init__(self, estimator=None, sigma=0.1, weight_noise="isotropic", weight_sigma=1.0,
                 oracle_samples=None, random_state=0):
        self.estimator = estimator
        self.sigma = sigma
        self.weight_noise = weight_noise
        self.weight_sigma = weight_sigma
        self.oracle_samples = oracle_samples
        self.random_state = random_state

    def fit(self, X, y):
        est = clone(self.estimator if self.estimator is not None else LooLogistic())
        est.set_params(loo=True)
        est.fit(X, y)
        self.estimator_ = est
        loo, preds = est.loo_weights_, est.loo_predictions_
        if self.weight_noise == "isotropic":
            cov = CovSpec.isotropic(self.weight_sigma)
        elif self.weight_noise == "hessian":
            H = hessian(loo.full_weights, est.dataset_, est.config_)
            H = H + default_damping(H) * np.eye(H.shape[0])
            cov = CovSpec.full_inverse(H / self.weight_sigma ** 2)
        else:
            raise ValueError("weight_noise must be 'isotropic' or 'hessian'")
        self.cov_ = cov
        s = loo.indices.size
        self.loo_cmi_ = B.loo_cmi_upper(loo, cov)
        self.floo_cmi_ = B.floo_cmi_upper(preds, self.sigma)
        self.jensen_upper_ = B.jensen_cmi_upper(loo, cov)
        self.gen_bound_weights_ = B.gen_bound_from_cmi(self.loo_cmi_, s)
        self.gen_bound_predictions_ = B.gen_bound_from_cmi(self.floo_cmi_, s)
        self.oracle_ = None
        if self.oracle_samples:
            self.oracle_ = {
                "loo_mc": mc_cmi(loo.rows(), cov, self.oracle_samples, self.random_state),
                "floo_mc": mc_floo_cmi(preds, self.sigma, self.oracle_samples, self.random_state),
            }
        return self

    def predict(self, X):
        check_is_fitted(self, "estimator_")
        return self.estimator_.predict(X)

    def bounds(self) -> dict:
        check_is_fitted(self, "estimator_")
        return {"loo_cmi": self.loo_cmi_, "floo_cmi": self.floo_cmi_, "jensen": self.jensen_upper_,
                "gen_bound_weights": self.gen_bound_weights_,
                "gen_bound_predictions": self.gen_bound_predictions_}
