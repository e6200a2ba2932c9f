"""Exact Shapley decomposition of PIN predictions on the link scale.

The interventional value function of a coalition ``C`` averages the link
prediction over a background set with the features outside ``C`` replaced by
background values. Because every unit depends on at most two features, each
unit's contribution only depends on which of its two features are in ``C``.
:class:`PairMaskTable` stores the four possible background means per pair, so
a value-function evaluation reduces to a table lookup and a weighted sum.
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .data import Dataset
from .embedding import embed_batch
from .model import PinModel, feature_projections, link, split_first_layer, units_from_preactivation
from .numeric import ContractError

MAX_SUBSET_Q = 12
MAX_PERMUTATION_Q = 8

# column index of the table: 0 both present, 1 first masked, 2 second masked, 3 both masked
BOTH, FIRST_MASKED, SECOND_MASKED, NONE = range(4)


def select_background(data: Dataset, size: int = 2000, seed: int = 0) -> np.ndarray:
    """Uniform sample of ``size`` rows without replacement (all rows if fewer)."""
    n = len(data)
    if n == 0:
        raise ContractError("cannot draw a background from an empty dataset")
    idx = np.random.default_rng(seed).choice(n, size=min(size, n), replace=False)
    return data.X[np.sort(idx)]


class Background:
    """Background rows with their embeddings and the instance-free both-masked means cached."""

    def __init__(self, model: PinModel, rows: np.ndarray):
        rows = np.atleast_2d(np.asarray(rows, dtype=np.float64))
        if len(rows) == 0:
            raise ContractError("empty background set")
        if rows.shape[1] != model.q:
            raise ContractError("background rows do not match the model's feature count")
        self.model = model
        self.rows = rows
        self.slots = model.active_slots()
        params, d = model.params, model.config.d
        phi, _ = embed_batch(params, model.schema, rows)
        self.U, self.V = feature_projections(params, np.ascontiguousarray(phi.transpose(1, 0, 2)), d)
        _, _, C = split_first_layer(params, d)
        self.T = params["tokens"][self.slots] @ C.T + params["net.b1"]
        self.J = model.pairs[self.slots, 0]
        self.K = model.pairs[self.slots, 1]
        self.w = params["out.w"][self.slots]
        self.b = float(params["out.b"][0])
        self.both_masked = _mean_units(params, self.U[self.J] + self.V[self.K] + self.T[:, None, :])

    def __len__(self) -> int:
        return len(self.rows)


@dataclass
class PairMaskTable:
    """Per-slot background means of a unit under the four masking cases, shape ``(P, 4)``."""

    values: np.ndarray
    first: np.ndarray  # feature in the first embedding position, per slot
    second: np.ndarray
    w: np.ndarray
    b: float


def precompute_pair_masks(x: np.ndarray, model: PinModel, background) -> PairMaskTable:
    bg = background if isinstance(background, Background) else Background(model, background)
    params, d = model.params, model.config.d
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    phi_x, _ = embed_batch(params, model.schema, x)
    Ux, Vx = feature_projections(params, np.ascontiguousarray(phi_x.transpose(1, 0, 2)), d)
    J, K = bg.J, bg.K
    table = np.empty((len(J), 4))
    h_full, _ = units_from_preactivation(params, Ux[J, 0] + Vx[K, 0] + bg.T)
    table[:, BOTH] = h_full
    table[:, NONE] = bg.both_masked
    # a diagonal unit is never half-masked; its single-masked columns just mirror "both masked"
    table[:, FIRST_MASKED] = bg.both_masked
    table[:, SECOND_MASKED] = bg.both_masked
    off = np.flatnonzero(J != K)
    if len(off):
        T = bg.T[off][:, None, :]
        table[off, FIRST_MASKED] = _mean_units(params, bg.U[J[off]] + Vx[K[off]] + T)
        table[off, SECOND_MASKED] = _mean_units(params, Ux[J[off]] + bg.V[K[off]] + T)
    return PairMaskTable(table, J, K, bg.w, bg.b)


def _mean_units(params, z1: np.ndarray) -> np.ndarray:
    h, _ = units_from_preactivation(params, z1)
    return h.mean(axis=1)


class ValueFunction:
    """Empirical interventional value function backed by a :class:`PairMaskTable`.

    ``calls`` counts requested evaluations; ``computed`` counts distinct
    coalitions actually summed (repeats are served from a memo).
    """

    def __init__(self, table: PairMaskTable, q: int):
        self.table = table
        self.q = q
        self.calls = 0
        self.computed = 0
        self._memo: dict[int, float] = {}
        self._rows = np.arange(len(table.w))

    def mask_of(self, coalition) -> int:
        m = 0
        for j in coalition:
            if not 0 <= j < self.q:
                raise ContractError(f"feature index {j} outside 0..{self.q - 1}")
            m |= 1 << int(j)
        return m

    def __call__(self, coalition) -> float:
        return self.by_mask(self.mask_of(coalition))

    def by_mask(self, mask: int) -> float:
        self.calls += 1
        val = self._memo.get(mask)
        if val is None:
            t = self.table
            present = (mask >> np.arange(self.q)) & 1
            case = (1 - present[t.first]) + 2 * (1 - present[t.second])
            val = t.b + float(t.w @ t.values[self._rows, case])
            self._memo[mask] = val
            self.computed += 1
        return val


def value_function(x: np.ndarray, coalition, model: PinModel, background) -> float:
    table = precompute_pair_masks(x, model, background)
    return ValueFunction(table, model.q)(coalition)


def value_function_direct(x: np.ndarray, coalition, model: PinModel, background: np.ndarray) -> float:
    """Recompute the value function by overriding background columns and averaging predictions."""
    Xc = np.array(background, dtype=np.float64, copy=True)
    cols = list(coalition)
    Xc[:, cols] = np.asarray(x, dtype=np.float64)[cols]
    return float(link(model, Xc).mean())


@dataclass
class ShapReport:
    psi: np.ndarray
    nu_empty: float
    nu_full: float
    instance_id: Optional[int] = None
    evaluations: int = 0

    @property
    def efficiency_gap(self) -> float:
        return self.nu_empty + float(self.psi.sum()) - self.nu_full


def _prepare(x, model, background):
    return ValueFunction(precompute_pair_masks(x, model, background), model.q)


def shapley_from_value_function(nu: ValueFunction, method: str = "paired", perm=None) -> ShapReport:
    q = nu.q
    full = (1 << q) - 1
    if method == "subsets":
        psi = _subset_formula(nu, q)
    elif method == "permutations":
        psi = _all_permutations(nu, q)
    elif method == "paired":
        psi = _paired(nu, q, list(range(q)) if perm is None else list(perm))
    else:
        raise ValueError(f"unknown method {method!r}")
    calls = nu.calls
    return ShapReport(psi, nu.by_mask(0), nu.by_mask(full), evaluations=calls)


def _subset_formula(nu: ValueFunction, q: int) -> np.ndarray:
    values = np.array([nu.by_mask(m) for m in range(1 << q)])
    psi = np.zeros(q)
    for j in range(q):
        bit = 1 << j
        acc = 0.0
        for m in range(1 << q):
            if m & bit:
                continue
            size = bin(m).count("1")
            acc += (values[m | bit] - values[m]) / math.comb(q - 1, size)
        psi[j] = acc / q
    return psi


def _all_permutations(nu: ValueFunction, q: int) -> np.ndarray:
    psi = np.zeros(q)
    count = 0
    for perm in itertools.permutations(range(q)):
        mask, prev = 0, nu.by_mask(0)
        for j in perm:
            mask |= 1 << j
            cur = nu.by_mask(mask)
            psi[j] += cur - prev
            prev = cur
        count += 1
    return psi / count


def _walk(nu: ValueFunction, order: Sequence[int], q: int) -> np.ndarray:
    contrib = np.zeros(q)
    mask, prev = 0, nu.by_mask(0)
    for j in order:
        mask |= 1 << j
        cur = nu.by_mask(mask)
        contrib[j] = cur - prev
        prev = cur
    return contrib


def _paired(nu: ValueFunction, q: int, perm: list) -> np.ndarray:
    if sorted(perm) != list(range(q)):
        raise ContractError(f"{perm} is not a permutation of 0..{q - 1}")
    return 0.5 * (_walk(nu, perm, q) + _walk(nu, perm[::-1], q))


def shapley_exact_subsets(x, model: PinModel, background, instance_id=None) -> ShapReport:
    """Shapley values from the weighted-subset formula (``2^q`` coalitions)."""
    if model.q > MAX_SUBSET_Q:
        raise ContractError(f"subset enumeration refused for q={model.q} > {MAX_SUBSET_Q}; "
                            "use shapley_paired_permutation, which is exact for this model")
    rep = shapley_from_value_function(_prepare(x, model, background), "subsets")
    rep.instance_id = instance_id
    return rep


def shapley_permutation_full(x, model: PinModel, background, instance_id=None) -> ShapReport:
    """Average marginal contribution over all ``q!`` feature orderings."""
    if model.q > MAX_PERMUTATION_Q:
        raise ContractError(f"full permutation SHAP refused for q={model.q} > {MAX_PERMUTATION_Q}")
    rep = shapley_from_value_function(_prepare(x, model, background), "permutations")
    rep.instance_id = instance_id
    return rep


def shapley_paired_permutation(x, model: PinModel, background, perm=None, instance_id=None) -> ShapReport:
    """One ordering and its reverse: ``2(q+1)`` value-function requests, exact for pairwise games."""
    rep = shapley_from_value_function(_prepare(x, model, background), "paired", perm)
    rep.instance_id = instance_id
    return rep


def explain(instances: np.ndarray, model: PinModel, background, perm=None) -> list[ShapReport]:
    bg = background if isinstance(background, Background) else Background(model, background)
    return [shapley_paired_permutation(x, model, bg, perm, instance_id=i)
            for i, x in enumerate(np.atleast_2d(instances))]


def shap_importance(instances: np.ndarray, model: PinModel, background, reports=None) -> np.ndarray:
    """Mean absolute Shapley value per feature over ``instances``."""
    instances = np.atleast_2d(instances)
    if len(instances) == 0:
        raise ContractError("need at least one instance")
    reports = explain(instances, model, background) if reports is None else reports
    return np.mean([np.abs(r.psi) for r in reports], axis=0)


def waterfall(report: ShapReport, names: Optional[Sequence[str]] = None) -> list[tuple[str, float, float]]:
    """Contributions ordered by ``|psi|`` (ties by feature index) with running totals from ``nu(empty)``."""
    q = len(report.psi)
    names = list(names) if names is not None else [f"x{j + 1}" for j in range(q)]
    order = sorted(range(q), key=lambda j: (-abs(report.psi[j]), j))
    rows, acc = [], report.nu_empty
    for j in order:
        acc += report.psi[j]
        rows.append((names[j], float(report.psi[j]), acc))
    return rows


def export_waterfall(report: ShapReport, path, names=None) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["feature", "psi", "cumulative"])
        w.writerow(["(baseline)", "", format(report.nu_empty, ".17g")])
        for name, psi, cum in waterfall(report, names):
            w.writerow([name, format(psi, ".17g"), format(cum, ".17g")])


def write_report_csv(report: ShapReport, path, names=None) -> None:
    """Per-instance CSV: a header row with ``nu_empty``/``nu_full``, then ``feature, psi``."""
    q = len(report.psi)
    names = list(names) if names is not None else [f"x{j + 1}" for j in range(q)]
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["nu_empty", format(report.nu_empty, ".17g"), "nu_full", format(report.nu_full, ".17g")])
        w.writerow(["feature", "psi"])
        for name, p in zip(names, report.psi):
            w.writerow([name, format(float(p), ".17g")])


def write_importance_csv(names: Sequence[str], importance: np.ndarray, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["feature", "mean_abs_psi"])
        for name, val in zip(names, importance):
            w.writerow([name, format(float(val), ".17g")])
