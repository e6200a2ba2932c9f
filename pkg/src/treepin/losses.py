"""Poisson deviance on the response and link scales."""

from __future__ import annotations

import numpy as np


def poisson_deviance(pred, Y, v) -> float:
    """Average Poisson deviance ``mean(2 v (f - Y - Y log(f / Y)))``.

    Rows with ``Y == 0`` contribute ``2 v f``.
    """
    pred = np.asarray(pred, dtype=np.float64)
    if np.any(~(pred > 0)):
        raise ValueError("Poisson deviance needs strictly positive predictions")
    return deviance_from_link(np.log(pred), Y, v)


def deviance_terms_from_link(eta, Y, v) -> np.ndarray:
    eta = np.asarray(eta, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    f = np.exp(eta)
    pos = Y > 0
    logY = np.log(np.where(pos, Y, 1.0))
    terms = f - Y - np.where(pos, Y * (eta - logY), 0.0)
    return 2.0 * v * terms


def deviance_from_link(eta, Y, v) -> float:
    terms = deviance_terms_from_link(eta, Y, v)
    if not np.all(np.isfinite(terms)):
        raise FloatingPointError("non-finite Poisson deviance")
    return float(terms.mean())


def deviance_link_gradient(eta, Y, v) -> np.ndarray:
    """Per-row derivative of the *average* deviance w.r.t. the link value."""
    return 2.0 * v * (np.exp(eta) - Y) / len(eta)
