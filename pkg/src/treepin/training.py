"""Mini-batch Adam training with plateau lr schedule, early stopping and ensembling."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .data import Dataset, split
from .losses import deviance_from_link, poisson_deviance
from .model import PinModel, SchemaMismatchError, link, pin_backward, predict, prepare
from .numeric import AdamState, ContractError, Params, PlateauSchedule, adam_step

log = logging.getLogger(__name__)

__all__ = [
    "TrainConfig", "TrainHistory", "TrainingError", "train", "optimize", "poisson_deviance",
    "ensemble_predict", "evaluate", "null_link",
]


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 128
    lr: float = 1e-3
    plateau_factor: float = 0.9
    plateau_patience: int = 5
    max_epochs: int = 100
    early_stop_patience: int = 15
    validation_fraction: float = 0.1
    min_delta: float = 1e-6
    seeds: tuple = tuple(range(1, 11))

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not 0 < self.validation_fraction < 1:
            raise ValueError("validation_fraction must lie in (0, 1)")
        if not 0 < self.plateau_factor < 1:
            raise ValueError("plateau_factor must lie in (0, 1)")
        if self.max_epochs < 0 or self.early_stop_patience < 1:
            raise ValueError("invalid epoch settings")
        self.seeds = tuple(int(s) for s in self.seeds)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        return cls(**json.loads(Path(path).read_text()))


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    best_epoch: Optional[int] = None  # 1-based; None when no epoch ran

    def to_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "val_loss", "lr"])
            for i, row in enumerate(zip(self.train_loss, self.val_loss, self.lr), start=1):
                w.writerow([i, *(format(x, ".17g") for x in row)])


def _flatten(params: Params) -> tuple[np.ndarray, Params]:
    """Copy ``params`` into one contiguous buffer and return it with per-name views."""
    flat = np.concatenate([p.reshape(-1) for p in params.values()])
    views, pos = {}, 0
    for name, p in params.items():
        views[name] = flat[pos:pos + p.size].reshape(p.shape)
        pos += p.size
    return flat, views


def optimize(params: Params, batch_grad: Callable[[np.ndarray], tuple[float, Params]],
             val_loss: Callable[[], float], n_rows: int, cfg: TrainConfig,
             rng: np.random.Generator) -> tuple[Params, TrainHistory]:
    """Generic early-stopped Adam loop over ``n_rows`` training rows.

    ``params`` is rebound to views of a flat buffer (updated in place);
    ``batch_grad(idx)`` returns the batch loss and gradients for the current
    parameters, ``val_loss()`` the validation loss. The best-validation
    parameters are restored before returning.
    """
    flat, views = _flatten(params)
    for name in params:
        params[name] = views[name]
    hist = TrainHistory()
    if cfg.max_epochs == 0:
        return params, hist
    state = AdamState(lr=cfg.lr)
    sched = PlateauSchedule(cfg.plateau_factor, cfg.plateau_patience, cfg.min_delta)
    best, best_flat, since_best = math.inf, flat.copy(), 0
    bs = cfg.batch_size
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(n_rows)
        total = 0.0
        for start in range(0, n_rows, bs):
            idx = order[start:start + bs]
            loss, grads = batch_grad(idx)
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite training loss in epoch {epoch}")
            total += loss * len(idx)
            gflat = np.concatenate([grads[name].reshape(-1) for name in params])
            adam_step({"all": flat}, {"all": gflat}, state)
        vl = val_loss()
        if not math.isfinite(vl):
            raise TrainingError(f"non-finite validation loss in epoch {epoch}")
        hist.train_loss.append(total / n_rows)
        hist.val_loss.append(vl)
        hist.lr.append(state.lr)
        log.debug("epoch %d train %.6f val %.6f lr %.3g", epoch, total / n_rows, vl, state.lr)
        if vl < best - cfg.min_delta:
            best, since_best = vl, 0
            best_flat[:] = flat
            hist.best_epoch = epoch
        else:
            since_best += 1
        state.lr = sched.update(vl, state.lr)
        if since_best >= cfg.early_stop_patience:
            break
    flat[:] = best_flat
    return params, hist


def null_link(data: Dataset) -> float:
    """Intercept-only link value ``log(sum N / sum v)``."""
    return math.log(data.N.sum() / data.v.sum())


def train(data: Dataset, model: PinModel, cfg: TrainConfig = TrainConfig(), seed: int = 0,
          validation: Optional[Dataset] = None) -> tuple[PinModel, TrainHistory]:
    """Fit a copy of ``model`` on ``data`` and return it with its history.

    ``validation`` defaults to a seeded ``cfg.validation_fraction`` split of ``data``.
    """
    if len(data) == 0:
        raise ContractError("empty training data")
    model = model.copy()
    data = prepare(model, data)
    split_seed, shuffle_seed = np.random.SeedSequence(seed).spawn(2)
    if validation is None:
        tr, va = split(data, cfg.validation_fraction, int(split_seed.generate_state(1)[0]))
    else:
        tr, va = data, prepare(model, validation)
    X, N, v = tr.X, tr.N, tr.v

    def batch_grad(idx):
        return pin_backward(model, X[idx], N[idx], v[idx])

    def val_loss():
        return deviance_from_link(link(model, va.X), va.Y, va.v)

    _, hist = optimize(model.params, batch_grad, val_loss, len(tr), cfg,
                       np.random.default_rng(shuffle_seed))
    model.seeds = {**model.seeds, "train": int(seed)}
    return model, hist


def ensemble_predict(models: Sequence[PinModel], X: np.ndarray) -> np.ndarray:
    """Average of member predictions on the frequency scale."""
    if len(models) == 0:
        raise ContractError("empty ensemble")
    for m in models[1:]:
        if m.schema != models[0].schema:
            raise SchemaMismatchError("ensemble members have different schemas")
    return np.mean([predict(m, X) for m in models], axis=0)


def evaluate(model, data: Dataset) -> float:
    """Average Poisson deviance of a model or a list of models (ensembled) on ``data``."""
    if len(data) == 0:
        raise ContractError("empty evaluation data")
    models = list(model) if isinstance(model, (list, tuple)) else [model]
    data = prepare(models[0], data)
    return poisson_deviance(ensemble_predict(models, data.X), data.Y, data.v)
