"""Seeded Poisson frequency data with known additive effects and planted interactions.

Log-rate::

    beta0 + sum_j f_j(x_j) + sum_(j,k) gamma * g(x_j, x_k)

with ``f_j`` from {linear, quadratic, sine} (continuous) or per-level values
(categorical), and ``g`` either ``x_j * x_k`` ("product") or
``1{x_j + x_k > 0}`` ("thresholded-sum"). Continuous features are uniform on
[-1, 1], optionally with a Gaussian-copula dependence between two of them.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import stats

from .data import Dataset, Feature, FeatureSchema
from .losses import deviance_from_link

EFFECTS = {
    "none": lambda x: np.zeros_like(x),
    "linear": lambda x: x,
    "quadratic": lambda x: x * x - 1.0 / 3.0,
    "sine": lambda x: np.sin(math.pi * x),
}


@dataclass
class Interaction:
    j: int
    k: int
    gamma: float
    form: str = "product"

    def __post_init__(self):
        if self.form not in ("product", "thresholded-sum"):
            raise ValueError(f"unknown interaction form {self.form!r}")
        if self.j == self.k:
            raise ValueError("interaction needs two distinct features")

    def value(self, X: np.ndarray) -> np.ndarray:
        a, b = X[:, self.j], X[:, self.k]
        if self.form == "product":
            return self.gamma * a * b
        return self.gamma * (a + b > 0).astype(np.float64)

    def additive_part(self, X: np.ndarray) -> np.ndarray:
        """Functional-ANOVA main effects of the term for independent uniform[-1, 1] inputs."""
        if self.form == "product":
            return np.zeros(len(X))
        # E[1{a+b>0} | a] = (1+a)/2, overall mean 1/2
        a, b = X[:, self.j], X[:, self.k]
        return self.gamma * ((1 + a) / 2 + (1 + b) / 2 - 0.5)


@dataclass
class GeneratorSpec:
    n: int = 10_000
    q: int = 4
    seed: int = 0
    intercept: float = math.log(0.1)
    # per feature: "linear" | "quadratic" | "sine" | "none" with coefficient, or categorical levels
    effects: list = field(default_factory=list)
    coefs: list = field(default_factory=list)
    categorical: dict = field(default_factory=dict)  # feature index -> {"probs": [...], "values": [...]}
    interactions: list = field(default_factory=list)
    exposure_mu: float = -0.5
    exposure_sigma: float = 0.5
    exposure_max: Optional[float] = 1.0
    copula: Optional[dict] = None  # {"j": 0, "k": 1, "rho": 0.8}
    mc_rows: int = 200_000

    def __post_init__(self):
        if not self.effects:
            self.effects = ["none"] * self.q
        if not self.coefs:
            self.coefs = [0.0] * self.q
        if len(self.effects) != self.q or len(self.coefs) != self.q:
            raise ValueError("effects and coefs need one entry per feature")
        for e in self.effects:
            if e not in EFFECTS:
                raise ValueError(f"unknown effect {e!r}")
        self.categorical = {int(k): v for k, v in self.categorical.items()}
        self.interactions = [i if isinstance(i, Interaction) else Interaction(**i) for i in self.interactions]
        seen = set()
        for it in self.interactions:
            key = frozenset((it.j, it.k))
            if key in seen:
                raise ValueError("planted pairs must be distinct")
            seen.add(key)
            if it.j in self.categorical or it.k in self.categorical:
                raise ValueError("planted interactions must involve continuous features")

    @classmethod
    def from_json(cls, path) -> "GeneratorSpec":
        return cls(**json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["categorical"] = {str(k): v for k, v in self.categorical.items()}
        return d

    def schema(self) -> FeatureSchema:
        feats = []
        for j in range(self.q):
            if j in self.categorical:
                n_lv = len(self.categorical[j]["probs"])
                feats.append(Feature(f"x{j + 1}", "categorical", tuple(f"L{i + 1}" for i in range(n_lv))))
            else:
                feats.append(Feature(f"x{j + 1}", "continuous"))
        return FeatureSchema(tuple(feats), exposure="exposure", response="frequency", count="claims")


def _features(spec: GeneratorSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    X = np.empty((n, spec.q))
    for j in range(spec.q):
        if j in spec.categorical:
            probs = np.asarray(spec.categorical[j]["probs"], dtype=np.float64)
            X[:, j] = rng.choice(len(probs), size=n, p=probs / probs.sum()) + 1
        else:
            X[:, j] = rng.uniform(-1.0, 1.0, size=n)
    if spec.copula:
        j, k, rho = spec.copula["j"], spec.copula["k"], spec.copula["rho"]
        z = rng.multivariate_normal([0.0, 0.0], [[1.0, rho], [rho, 1.0]], size=n)
        X[:, j] = 2.0 * stats.norm.cdf(z[:, 0]) - 1.0
        X[:, k] = 2.0 * stats.norm.cdf(z[:, 1]) - 1.0
    return X


def additive_log_rate(spec: GeneratorSpec, X: np.ndarray) -> np.ndarray:
    eta = np.full(len(X), spec.intercept)
    for j in range(spec.q):
        if j in spec.categorical:
            vals = np.asarray(spec.categorical[j].get("values", [0.0] * len(spec.categorical[j]["probs"])))
            eta += vals[X[:, j].astype(int) - 1]
        else:
            eta += spec.coefs[j] * EFFECTS[spec.effects[j]](X[:, j])
    return eta


def true_log_rate(spec: GeneratorSpec, X: np.ndarray) -> np.ndarray:
    eta = additive_log_rate(spec, X)
    for it in spec.interactions:
        eta += it.value(X)
    return eta


def _exposure(spec: GeneratorSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    v = rng.lognormal(spec.exposure_mu, spec.exposure_sigma, size=n)
    if spec.exposure_max is not None:
        v = np.minimum(v, spec.exposure_max)
    return v


def generate(spec: GeneratorSpec) -> tuple[Dataset, dict]:
    """Draw a dataset and an oracle record (true log-rates, true and additive-projection deviances)."""
    rng = np.random.default_rng(spec.seed)
    X = _features(spec, spec.n, rng)
    v = _exposure(spec, spec.n, rng)
    eta = true_log_rate(spec, X)
    N = rng.poisson(v * np.exp(eta)).astype(np.float64)
    data = Dataset(X, N, v, spec.schema())

    # Monte Carlo on an independent sample (features assumed independent for the projection)
    mc = np.random.default_rng([spec.seed, 1])
    Xm = _features(spec, spec.mc_rows, mc)
    vm = _exposure(spec, spec.mc_rows, mc)
    eta_m = true_log_rate(spec, Xm)
    Nm = mc.poisson(vm * np.exp(eta_m)).astype(np.float64)
    eta_add = additive_log_rate(spec, Xm) + sum((it.additive_part(Xm) for it in spec.interactions),
                                                np.zeros(len(Xm)))
    # refit the intercept of the projection so it is calibrated on the frequency scale
    eta_add += math.log((vm * np.exp(eta_m)).sum() / (vm * np.exp(eta_add)).sum())
    oracle = {
        "spec": spec.to_dict(),
        "true_log_rate": eta.tolist(),
        "true_deviance_mc": deviance_from_link(eta_m, Nm / vm, vm),
        "additive_deviance_mc": deviance_from_link(eta_add, Nm / vm, vm),
        "null_deviance_mc": deviance_from_link(np.full(len(Nm), math.log(Nm.sum() / vm.sum())), Nm / vm, vm),
    }
    return data, oracle
