"""Small dense numeric kernel: activations, Adam, plateau schedule, finite differences.

Parameter sets are plain ``dict[str, np.ndarray]`` of float64 arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict

import numpy as np

Params = Dict[str, np.ndarray]


class ContractError(ValueError):
    """A caller violated a documented precondition (shape, range, index)."""


def hard_sigmoid(x):
    """Centered hard sigmoid ``max(0, min(1, (1 + x) / 2))``.

    Works elementwise on arrays; scalars come back as Python floats.
    """
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("hard_sigmoid: non-finite input")
    out = np.clip(0.5 * (1.0 + arr), 0.0, 1.0)
    return float(out) if out.ndim == 0 else out


def hard_sigmoid_derivative(x):
    # 1/2 strictly inside (-1, 1); 0 at the kinks and in the saturated region
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("hard_sigmoid_derivative: non-finite input")
    out = np.where(np.abs(arr) < 1.0, 0.5, 0.0)
    return float(out) if out.ndim == 0 else out


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Params = field(default_factory=dict)
    v: Params = field(default_factory=dict)

    def __post_init__(self):
        if not self.lr > 0:
            raise ContractError(f"learning rate must be positive, got {self.lr}")


def adam_step(params: Params, grads: Params, state: AdamState) -> tuple[Params, AdamState]:
    """One bias-corrected Adam update, applied in place to ``params``.

    Only keys present in ``grads`` are updated; missing moment arrays are
    created as zeros on first use.
    """
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1**t
    corr2 = 1.0 - b2**t
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ContractError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name!r}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= state.lr * (m / corr1) / (np.sqrt(v / corr2) + state.eps)
    return params, state


@dataclass
class PlateauSchedule:
    """Reduce-on-plateau: multiply lr by ``factor`` after ``patience`` flat epochs."""

    factor: float = 0.9
    patience: int = 5
    min_delta: float = 1e-6
    best: float = np.inf
    wait: int = 0

    def __post_init__(self):
        if not 0.0 < self.factor < 1.0:
            raise ContractError("plateau factor must lie in (0, 1)")
        if self.patience < 1:
            raise ContractError("plateau patience must be >= 1")

    def update(self, val_loss: float, lr: float) -> float:
        """Record one epoch's validation loss and return the (possibly reduced) lr."""
        if val_loss < self.best - self.min_delta:
            self.best = val_loss
            self.wait = 0
            return lr
        self.wait += 1
        if self.wait >= self.patience:
            self.wait = 0
            return lr * self.factor
        return lr


def finite_difference_gradient(
    loss: Callable[[Params], float], params: Params, epsilon: float = 1e-5
) -> Params:
    """Central-difference gradient of ``loss`` at ``params``, coordinate by coordinate."""
    if not epsilon > 0:
        raise ContractError("epsilon must be positive")
    grads: Params = {}
    for name, p in params.items():
        g = np.zeros_like(p)
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + epsilon
            up = loss(params)
            flat[i] = old - epsilon
            down = loss(params)
            flat[i] = old
            gflat[i] = (up - down) / (2.0 * epsilon)
        grads[name] = g
    return grads
