"""Tree-like pairwise interaction network: forward pass, backward pass, persistence.

A model keeps one *slot* per unordered feature pair ``j <= k``. Each slot owns
an interaction token, an output weight and an orientation ``(a, b)`` telling
the shared network which feature goes into the first and which into the
second embedding position. Freshly built models use ``(a, b) = (j, k)``;
:func:`permute_features` relabels orientations instead of the shared weights.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .data import Dataset, FeatureSchema, Scaler, apply_scalers
from .embedding import embed_backward, embed_batch, embedding_param_shapes, tokenize
from .losses import deviance_from_link, deviance_link_gradient
from .numeric import ContractError, Params, hard_sigmoid, hard_sigmoid_derivative, relu

FORMAT_VERSION = 1
CHUNK = 8192


class ModelLoadError(ValueError):
    pass


class SchemaMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class PinConfig:
    d: int = 10
    d_hidden: int = 20
    d0: int = 10
    d1: int = 30
    d2: int = 20

    def __post_init__(self):
        for name, val in asdict(self).items():
            if int(val) != val or val < 1:
                raise ValueError(f"{name} must be a positive integer")


def triangular_pairs(q: int) -> np.ndarray:
    return np.array([(j, k) for j in range(q) for k in range(j, q)], dtype=np.int64)


def param_shapes(schema: FeatureSchema, cfg: PinConfig) -> dict[str, tuple]:
    q = schema.q
    n_pairs = q * (q + 1) // 2
    shapes = embedding_param_shapes(schema, cfg.d, cfg.d_hidden)
    shapes.update({
        "tokens": (n_pairs, cfg.d0),
        "net.W1": (cfg.d1, 2 * cfg.d + cfg.d0),
        "net.b1": (cfg.d1,),
        "net.W2": (cfg.d2, cfg.d1),
        "net.b2": (cfg.d2,),
        "net.W3": (1, cfg.d2),
        "net.b3": (1,),
        "out.w": (n_pairs,),
        "out.b": (1,),
    })
    return shapes


@dataclass
class PinModel:
    schema: FeatureSchema
    config: PinConfig
    params: Params
    pairs: np.ndarray
    active: np.ndarray
    scalers: dict[str, Scaler] = field(default_factory=dict)
    seeds: dict = field(default_factory=dict)
    frozen: frozenset = frozenset()

    @property
    def q(self) -> int:
        return self.schema.q

    @property
    def n_pairs(self) -> int:
        return len(self.pairs)

    def slot(self, j: int, k: int) -> int:
        """Slot index of the unordered pair ``{j, k}``."""
        want = {int(j), int(k)}
        for s, (a, b) in enumerate(self.pairs):
            if {int(a), int(b)} == want:
                return s
        raise ContractError(f"no slot for pair ({j}, {k})")

    def active_slots(self) -> np.ndarray:
        return np.flatnonzero(self.active)

    def copy(self) -> "PinModel":
        return PinModel(self.schema, self.config, {k: v.copy() for k, v in self.params.items()},
                        self.pairs.copy(), self.active.copy(), dict(self.scalers), dict(self.seeds),
                        frozenset(self.frozen))

    def set_active(self, active) -> None:
        """Replace the active-slot mask; deactivated slots get their weight zeroed."""
        active = np.asarray(active, dtype=bool)
        if active.shape != (self.n_pairs,):
            raise ContractError("active mask must have one entry per pair slot")
        self.active = active.copy()
        self.params["out.w"][~self.active] = 0.0


def init_model(schema: FeatureSchema, config: PinConfig = PinConfig(), seed: int = 0,
               scalers: Optional[dict[str, Scaler]] = None, base_rate: Optional[float] = None,
               active=None) -> PinModel:
    """Seeded initialization: Glorot-uniform weights, zero biases, N(0, 1/d0) tokens,
    zero output weights and output bias ``log(base_rate)`` when given."""
    rng = np.random.default_rng(seed)
    params: Params = {}
    for name, shape in param_shapes(schema, config).items():
        leaf = name.split(".")[-1]
        if name == "tokens":
            params[name] = rng.normal(0.0, 1.0 / math.sqrt(config.d0), size=shape)
        elif name == "out.w" or leaf.startswith("b"):
            params[name] = np.zeros(shape)
        else:
            fan_out, fan_in = (shape[1], shape[0]) if leaf == "W0" else shape
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            params[name] = rng.uniform(-limit, limit, size=shape)
    if base_rate is not None:
        params["out.b"][0] = math.log(base_rate)
    pairs = triangular_pairs(schema.q)
    model = PinModel(schema, config, params, pairs, np.ones(len(pairs), dtype=bool),
                     dict(scalers or {}), {"init": int(seed)})
    if active is not None:
        model.set_active(active)
    return model


def diagonal_mask(q: int) -> np.ndarray:
    pairs = triangular_pairs(q)
    return pairs[:, 0] == pairs[:, 1]


# ---------------------------------------------------------------------------
# shared interaction network, batched


def split_first_layer(params: Params, d: int):
    W1 = params["net.W1"]
    return W1[:, :d], W1[:, d:2 * d], W1[:, 2 * d:]


def feature_projections(params: Params, phi: np.ndarray, d: int):
    """First-layer contributions of every feature in the first and second embedding position.

    ``phi`` is pair-major ``(q, B, d)``; both outputs are ``(q, B, d1)``.
    """
    A, B, _ = split_first_layer(params, d)
    return phi @ A.T, phi @ B.T


def units_from_preactivation(params: Params, z1: np.ndarray):
    """Run layers 2..3 and the hard sigmoid on first-layer pre-activations ``(..., d1)``."""
    shape = z1.shape[:-1]
    z1 = z1.reshape(-1, z1.shape[-1])
    r1 = relu(z1)
    z2 = r1 @ params["net.W2"].T
    z2 += params["net.b2"]
    r2 = relu(z2)
    logit = r2 @ params["net.W3"][0] + params["net.b3"][0]
    return hard_sigmoid(logit).reshape(shape), (z1, r1, z2, r2, logit)


def interaction_forward(model: PinModel, X: np.ndarray, slots: np.ndarray, params: Params = None):
    """Units ``h`` of shape ``(len(slots), B)`` plus a cache for :func:`interaction_backward`."""
    params = model.params if params is None else params
    d = model.config.d
    phi, emb_cache = embed_batch(params, model.schema, X)
    phi = np.ascontiguousarray(phi.transpose(1, 0, 2))
    U, V = feature_projections(params, phi, d)
    _, _, C = split_first_layer(params, d)
    J = model.pairs[slots, 0]
    K = model.pairs[slots, 1]
    T = params["tokens"][slots] @ C.T + params["net.b1"]
    z1 = U[J]
    z1 += V[K]
    z1 += T[:, None, :]
    h, net_cache = units_from_preactivation(params, z1)
    return h, (X, phi, emb_cache, slots, J, K, net_cache)


def interaction_backward(model: PinModel, cache, g_h: np.ndarray, params: Params = None) -> Params:
    """Gradients of the shared network, tokens and embeddings given ``dL/dh`` of shape ``(P, B)``."""
    params = model.params if params is None else params
    X, phi, emb_cache, slots, J, K, (z1, r1, z2, r2, logit) = cache
    d, q = model.config.d, model.q
    P, Bsz = g_h.shape
    A, Bm, C = split_first_layer(params, d)
    d2, d1 = params["net.W2"].shape
    grads: Params = {}

    g_logit = g_h.reshape(-1) * hard_sigmoid_derivative(logit)
    grads["net.W3"] = (g_logit @ r2)[None, :]
    grads["net.b3"] = np.array([g_logit.sum()])
    g_z2 = np.multiply.outer(g_logit, params["net.W3"][0])
    g_z2 *= z2 > 0
    grads["net.W2"] = g_z2.T @ r1
    grads["net.b2"] = g_z2.sum(axis=0)
    g_z1 = g_z2 @ params["net.W2"]
    g_z1 *= z1 > 0
    grads["net.b1"] = g_z1.sum(axis=0)

    g_z1 = g_z1.reshape(P, Bsz * d1)
    G_T = g_z1.reshape(P, Bsz, d1).sum(axis=1)
    gC = G_T.T @ params["tokens"][slots]
    g_tokens = np.zeros_like(params["tokens"])
    g_tokens[slots] = G_T @ C
    grads["tokens"] = g_tokens

    SJ = np.zeros((q, P))
    SJ[J, np.arange(P)] = 1.0
    SK = np.zeros((q, P))
    SK[K, np.arange(P)] = 1.0
    g_U = (SJ @ g_z1).reshape(q * Bsz, d1)
    g_V = (SK @ g_z1).reshape(q * Bsz, d1)
    phi_flat = phi.reshape(q * Bsz, d)
    grads["net.W1"] = np.concatenate([g_U.T @ phi_flat, g_V.T @ phi_flat, gC], axis=1)
    g_phi = (g_U @ A + g_V @ Bm).reshape(q, Bsz, d).transpose(1, 0, 2)
    embed_backward(params, model.schema, X, emb_cache, g_phi, grads)
    return grads


# ---------------------------------------------------------------------------
# PIN head


def link_batch(model: PinModel, X: np.ndarray) -> np.ndarray:
    slots = model.active_slots()
    b = model.params["out.b"][0]
    if len(slots) == 0:
        return np.full(len(X), b)
    h, _ = interaction_forward(model, X, slots)
    return model.params["out.w"][slots] @ h + b


def link(model: PinModel, X: np.ndarray) -> np.ndarray:
    """Link-scale predictions ``b + sum w h`` for scaled feature rows ``X``."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != model.q:
        raise ContractError(f"expected {model.q} feature columns, got {X.shape[1]}")
    return np.concatenate([link_batch(model, X[i:i + CHUNK]) for i in range(0, len(X), CHUNK)]) \
        if len(X) else np.empty(0)


def predict(model: PinModel, X: np.ndarray) -> np.ndarray:
    return np.exp(link(model, X))


def prepare(model: PinModel, data: Dataset) -> Dataset:
    """Check the schema and scale raw data with the model's stored scalers."""
    if data.schema != model.schema:
        raise SchemaMismatchError("dataset schema does not match the model schema")
    return data if data.scaled else apply_scalers(data, model.scalers)


def predict_dataset(model: PinModel, data: Dataset) -> np.ndarray:
    return predict(model, prepare(model, data).X)


def pin_loss(model: PinModel, X, N, v) -> float:
    return deviance_from_link(link(model, X), N / v, v)


def pin_backward(model: PinModel, X: np.ndarray, N: np.ndarray, v: np.ndarray) -> tuple[float, Params]:
    """Batch Poisson deviance and its exact gradient w.r.t. every unfrozen parameter.

    Frozen parameters and inactive output weights receive zero gradient.
    """
    if len(X) == 0:
        raise ContractError("empty batch")
    params = model.params
    slots = model.active_slots()
    Y = N / v
    b = params["out.b"][0]
    if len(slots):
        h, cache = interaction_forward(model, X, slots)
        w = params["out.w"][slots]
        eta = w @ h + b
    else:
        eta = np.full(len(X), b)
    loss = deviance_from_link(eta, Y, v)
    g_eta = deviance_link_gradient(eta, Y, v)

    grads = {k: np.zeros_like(p) for k, p in params.items()}
    grads["out.b"] = np.array([g_eta.sum()])
    if len(slots):
        gw = np.zeros_like(params["out.w"])
        gw[slots] = h @ g_eta
        grads["out.w"] = gw
        grads.update(interaction_backward(model, cache, np.multiply.outer(w, g_eta)))
    for name in model.frozen:
        grads[name] = np.zeros_like(params[name])
    return loss, grads


# ---------------------------------------------------------------------------
# single-instance operations


def interaction_logit(phi_j: np.ndarray, phi_k: np.ndarray, token: np.ndarray, params: Params) -> float:
    z = np.concatenate([phi_j, phi_k, token])
    if z.shape[0] != params["net.W1"].shape[1]:
        raise ContractError(f"concatenated input has length {z.shape[0]}, "
                            f"network expects {params['net.W1'].shape[1]}")
    r1 = relu(params["net.W1"] @ z + params["net.b1"])
    r2 = relu(params["net.W2"] @ r1 + params["net.b2"])
    return float(params["net.W3"][0] @ r2 + params["net.b3"][0])


def interaction_unit(x: np.ndarray, j: int, k: int, model: PinModel) -> float:
    """``h_{j,k}(x)`` for 0-based ``j <= k`` and a scaled feature vector ``x``."""
    if j > k:
        raise ContractError(f"pair ({j}, {k}) lies in the undefined lower triangle")
    s = model.slot(j, k)
    a, b = model.pairs[s]
    phi = tokenize(np.asarray(x, dtype=np.float64), model.params, model.schema)
    return hard_sigmoid(interaction_logit(phi[:, a], phi[:, b], model.params["tokens"][s], model.params))


def pin_forward(x: np.ndarray, model: PinModel) -> float:
    """Predicted frequency ``exp(b + sum_active w h)`` for one scaled feature vector."""
    eta = model.params["out.b"][0]
    for s in model.active_slots():
        a, b = model.pairs[s]
        eta += model.params["out.w"][s] * interaction_unit(x, min(a, b), max(a, b), model)
    return math.exp(eta)


# ---------------------------------------------------------------------------
# accounting, grid export, permutation


def parameter_count(config: PinConfig, schema: FeatureSchema) -> dict[str, int]:
    q = schema.q
    n_pairs = q * (q + 1) // 2
    n_cont = sum(not f.is_categorical for f in schema.features)
    d, dh, d0, d1, d2 = config.d, config.d_hidden, config.d0, config.d1, config.d2
    counts = {
        "continuous": n_cont * (2 * dh + (dh + 1) * d),
        "categorical": sum(f.n_levels * d for f in schema.features if f.is_categorical),
        "tokens": n_pairs * d0,
        "layer1": d1 * (2 * d + d0) + d1,
        "layer2": d2 * d1 + d2,
        "output_layer": d2 + 1,
        "output_weights": n_pairs + 1,
    }
    counts["total"] = sum(counts.values())
    return counts


def predict_grid(model: PinModel, feat_a: int, feat_b: int, resolution: int, background: np.ndarray,
                 ranges: Optional[Sequence[tuple[float, float]]] = None) -> np.ndarray:
    """M-plot data: rows ``(a, b, mean prediction)`` with features ``a``/``b`` overridden.

    Continuous axes use ``resolution`` points over the background's observed range
    (or ``ranges``); categorical axes enumerate all levels.
    """
    if feat_a == feat_b:
        raise ContractError("grid features must differ")
    background = np.atleast_2d(np.asarray(background, dtype=np.float64))
    if len(background) == 0:
        raise ContractError("empty background")
    axes = []
    for i, j in enumerate((feat_a, feat_b)):
        f = model.schema.features[j]
        if f.is_categorical:
            axes.append(np.arange(1, f.n_levels + 1, dtype=np.float64))
        else:
            lo, hi = ranges[i] if ranges is not None else (background[:, j].min(), background[:, j].max())
            axes.append(np.linspace(lo, hi, resolution))
    rows = []
    Xg = background.copy()
    for a in axes[0]:
        for b in axes[1]:
            Xg[:, feat_a] = a
            Xg[:, feat_b] = b
            rows.append((a, b, predict(model, Xg).mean()))
    return np.array(rows)


def permute_features(model: PinModel, perm: Sequence[int]) -> PinModel:
    """Reindex the model for inputs whose column ``i`` holds old feature ``perm[i]``."""
    perm = [int(p) for p in perm]
    q = model.q
    if sorted(perm) != list(range(q)):
        raise ContractError(f"{perm} is not a permutation of 0..{q - 1}")
    new_pos = np.empty(q, dtype=np.int64)
    new_pos[perm] = np.arange(q)
    params: Params = {}
    for name, val in model.params.items():
        if name.startswith("f"):
            j, leaf = name[1:].split(".")
            params[f"f{new_pos[int(j)]}.{leaf}"] = val.copy()
        else:
            params[name] = val.copy()
    params = {k: params[k] for k in param_shapes(model.schema.permuted(perm), model.config)}
    return PinModel(model.schema.permuted(perm), model.config, params, new_pos[model.pairs],
                    model.active.copy(), dict(model.scalers), dict(model.seeds), frozenset(model.frozen))


# ---------------------------------------------------------------------------
# persistence


def _encode(arr: np.ndarray) -> dict:
    return {"shape": list(arr.shape), "data": [format(float(x), ".17g") for x in arr.reshape(-1)]}


def _decode(obj: dict) -> np.ndarray:
    return np.array([float(s) for s in obj["data"]], dtype=np.float64).reshape(obj["shape"])


def model_to_dict(model: PinModel) -> dict:
    return {
        "format": "treepin-model",
        "version": FORMAT_VERSION,
        "config": asdict(model.config),
        "schema": model.schema.to_dict(),
        "scalers": {k: [format(s.lo, ".17g"), format(s.hi, ".17g")] for k, s in model.scalers.items()},
        "seeds": model.seeds,
        "pairs": model.pairs.tolist(),
        "active": model.active.astype(int).tolist(),
        "frozen": sorted(model.frozen),
        "params": {k: _encode(v) for k, v in model.params.items()},
    }


def model_from_dict(obj: dict) -> PinModel:
    if obj.get("format") != "treepin-model":
        raise ModelLoadError("not a treepin model file")
    if obj.get("version") != FORMAT_VERSION:
        raise ModelLoadError(f"unsupported model format version {obj.get('version')!r}")
    try:
        config = PinConfig(**obj["config"])
        schema = FeatureSchema.from_dict(obj["schema"])
        scalers = {k: Scaler(float(lo), float(hi)) for k, (lo, hi) in obj["scalers"].items()}
        params = {k: _decode(v) for k, v in obj["params"].items()}
        pairs = np.array(obj["pairs"], dtype=np.int64).reshape(-1, 2)
        active = np.array(obj["active"], dtype=bool)
        model = PinModel(schema, config, params, pairs, active, scalers, dict(obj["seeds"]),
                         frozenset(obj["frozen"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelLoadError(f"corrupt model file: {exc}") from None
    expected = param_shapes(schema, config)
    got = {k: tuple(v.shape) for k, v in params.items()}
    if got != expected:
        raise ModelLoadError("parameter shapes do not match the stored configuration")
    if len(pairs) != expected["tokens"][0] or active.shape != (len(pairs),):
        raise ModelLoadError("pair table does not match the schema")
    return model


def save_model(model: PinModel, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(model_to_dict(model)))
    tmp.replace(path)


def load_model(path) -> PinModel:
    try:
        obj = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ModelLoadError(f"{path}: corrupt model file ({exc})") from None
    return model_from_dict(obj)
