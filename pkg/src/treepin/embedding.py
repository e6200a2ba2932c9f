"""Per-feature tokenizers: entity embeddings and two-layer tanh embeddings.

Parameter names (per feature index ``j``):

* categorical: ``f{j}.W0`` with shape ``(n_j, d)``
* continuous:  ``f{j}.W1`` ``(d', 1)``, ``f{j}.b1`` ``(d',)``, ``f{j}.W2`` ``(d, d')``, ``f{j}.b2`` ``(d,)``
"""

from __future__ import annotations

import numpy as np

from .data import FeatureSchema
from .numeric import ContractError, Params


def embed_categorical(level: int, W0: np.ndarray) -> np.ndarray:
    """Row ``level`` (1-based) of the embedding matrix."""
    n = W0.shape[0]
    if int(level) != level or not 1 <= level <= n:
        raise ContractError(f"level {level} outside 1..{n}")
    return W0[int(level) - 1].copy()


def embed_continuous(x: float, W1: np.ndarray, b1: np.ndarray, W2: np.ndarray, b2: np.ndarray) -> np.ndarray:
    if not np.isfinite(x):
        raise ContractError("continuous input must be finite")
    return W2 @ np.tanh(W1[:, 0] * x + b1) + b2


def tokenize(x: np.ndarray, params: Params, schema: FeatureSchema) -> np.ndarray:
    """Token tensor of shape ``(d, q)``; column ``j`` is the embedding of ``x[j]``."""
    cols = []
    for j, f in enumerate(schema.features):
        if f.is_categorical:
            cols.append(embed_categorical(x[j], params[f"f{j}.W0"]))
        else:
            cols.append(embed_continuous(x[j], params[f"f{j}.W1"], params[f"f{j}.b1"],
                                         params[f"f{j}.W2"], params[f"f{j}.b2"]))
    return np.stack(cols, axis=1)


def embedding_param_shapes(schema: FeatureSchema, d: int, d_hidden: int) -> dict[str, tuple]:
    shapes = {}
    for j, f in enumerate(schema.features):
        if f.is_categorical:
            shapes[f"f{j}.W0"] = (f.n_levels, d)
        else:
            shapes[f"f{j}.W1"] = (d_hidden, 1)
            shapes[f"f{j}.b1"] = (d_hidden,)
            shapes[f"f{j}.W2"] = (d, d_hidden)
            shapes[f"f{j}.b2"] = (d,)
    return shapes


def embed_batch(params: Params, schema: FeatureSchema, X: np.ndarray) -> tuple[np.ndarray, list]:
    """Embed a batch ``X`` of shape ``(B, q)`` into ``phi`` of shape ``(B, q, d)``.

    Returns ``phi`` and a cache for :func:`embed_backward`.
    """
    cols, cache = [], []
    for j, f in enumerate(schema.features):
        xj = X[:, j]
        if f.is_categorical:
            W0 = params[f"f{j}.W0"]
            idx = xj.astype(np.int64) - 1
            if idx.size and (idx.min() < 0 or idx.max() >= W0.shape[0]):
                raise ContractError(f"feature {f.name}: level index outside 1..{W0.shape[0]}")
            cols.append(W0[idx])
            cache.append(idx)
        else:
            t = np.tanh(np.outer(xj, params[f"f{j}.W1"][:, 0]) + params[f"f{j}.b1"])
            cols.append(t @ params[f"f{j}.W2"].T + params[f"f{j}.b2"])
            cache.append(t)
    return np.stack(cols, axis=1), cache


def embed_backward(params: Params, schema: FeatureSchema, X: np.ndarray, cache: list,
                   g_phi: np.ndarray, grads: Params) -> None:
    """Accumulate embedding gradients into ``grads`` given ``dL/dphi`` of shape ``(B, q, d)``."""
    for j, f in enumerate(schema.features):
        g = g_phi[:, j, :]
        if f.is_categorical:
            W0 = params[f"f{j}.W0"]
            gW0 = np.zeros_like(W0)
            np.add.at(gW0, cache[j], g)
            grads[f"f{j}.W0"] = gW0
        else:
            t = cache[j]
            grads[f"f{j}.W2"] = g.T @ t
            grads[f"f{j}.b2"] = g.sum(axis=0)
            g_pre = (g @ params[f"f{j}.W2"]) * (1.0 - t * t)
            grads[f"f{j}.W1"] = (g_pre.T @ X[:, j])[:, None]
            grads[f"f{j}.b1"] = g_pre.sum(axis=0)
