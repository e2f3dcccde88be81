"""Bounded per-sample losses used when evaluating the bounds.

The generalization bounds assume a loss in [0, 1]. Unbounded losses are
divided by a declared cap and clipped; the cap travels with every report.
"""
from __future__ import annotations

import math

import numpy as np

from .exceptions import ConfigError

LOSS_IDS = ("zero-one", "clipped-ce", "clipped-squared")


def default_cap(loss_id: str, n_classes: int = 2) -> float:
    if loss_id == "zero-one":
        return 1.0
    if loss_id == "clipped-ce":
        return 4.0 * math.log(max(n_classes, 2))
    if loss_id == "clipped-squared":
        return 1.0
    raise ConfigError(f"unknown loss {loss_id!r}; expected one of {LOSS_IDS}")


def per_sample_loss(preds, labels, loss_id: str, cap=None) -> np.ndarray:
    """Loss of each prediction row against its label, in [0, 1].

    ``preds`` is ``(m, d)``: class probabilities for classifiers, a single
    column for regression.
    """
    P = np.asarray(preds, dtype=np.float64)
    if P.ndim == 1:
        P = P[:, None]
    y = np.asarray(labels)
    if loss_id == "zero-one":
        if P.shape[1] < 2:
            raise ConfigError("zero-one loss needs class-probability predictions")
        return (np.argmax(P, axis=1) != y).astype(np.float64)
    if cap is None:
        cap = default_cap(loss_id, P.shape[1])
    if loss_id == "clipped-ce":
        if P.shape[1] < 2:
            raise ConfigError("cross-entropy needs class-probability predictions")
        py = P[np.arange(P.shape[0]), y.astype(np.int64)]
        ce = -np.log(np.maximum(py, np.finfo(float).tiny))
        return np.clip(ce / cap, 0.0, 1.0)
    if loss_id == "clipped-squared":
        return np.clip((P[:, 0] - y.astype(np.float64)) ** 2 / cap, 0.0, 1.0)
    raise ConfigError(f"unknown loss {loss_id!r}; expected one of {LOSS_IDS}")
