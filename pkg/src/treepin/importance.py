"""Interaction importance by joint multi-output fitting against a frozen additive baseline.

Every candidate pair ``(j, k)``, ``j < k``, gets its own output component::

    exp(offset(x) + b_jk + w_jk * h_jk(x))

where ``offset`` is the frozen baseline link (diagonal-only PIN plus any
previously selected terms). All components are fitted in one run on the sum
of their deviances; the shared network and embeddings receive the summed
gradient, while token, weight and bias offset stay private to each pair.

Early stopping is tracked per component: each keeps a parameter snapshot from
the epoch of its own best validation deviance, and the run stops once no
component has improved for ``early_stop_patience`` epochs. With a summed
criterion the many noise-only components stop the run while a strong
component is still improving.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .data import Dataset, split
from .losses import deviance_from_link, deviance_terms_from_link
from .model import (PinConfig, PinModel, diagonal_mask, init_model, interaction_backward,
                    interaction_forward, link, prepare)
from .numeric import ContractError
from .training import TrainConfig, TrainHistory, optimize, train


@dataclass
class FrozenTerm:
    """A selected interaction ``b_jk + w_jk h_jk(x)`` evaluated with a parameter snapshot."""

    pair: tuple[int, int]
    model: PinModel  # only the pair's slot active; out.b holds b_jk

    def __call__(self, X: np.ndarray) -> np.ndarray:
        return link(self.model, X)


@dataclass
class MultiOutputPin:
    baseline: PinModel
    terms: list
    net: PinModel  # interaction pathway; active slots = candidate pairs
    offsets: np.ndarray  # b_jk per slot
    history: Optional[TrainHistory] = None
    # slot -> parameter dict (with "pair.b") at that component's best validation epoch
    snapshots: Optional[dict] = None

    @property
    def candidates(self) -> list[tuple[int, int]]:
        return [tuple(int(c) for c in sorted(self.net.pairs[s])) for s in self.net.active_slots()]

    def base_link(self, X: np.ndarray) -> np.ndarray:
        eta = link(self.baseline, X)
        for t in self.terms:
            eta = eta + t(X)
        return eta

    def component_links(self, X: np.ndarray, base: Optional[np.ndarray] = None) -> np.ndarray:
        """Link values of every candidate component, shape ``(n_candidates, n)``."""
        base = self.base_link(X) if base is None else base
        slots = self.net.active_slots()
        out = np.empty((len(slots), len(X)))
        if self.snapshots is not None:
            return self._snapshot_links(X, base, slots, out)
        for i in range(0, len(X), 8192):
            h, _ = interaction_forward(self.net, X[i:i + 8192], slots)
            out[:, i:i + 8192] = (self.offsets[slots, None] + self.net.params["out.w"][slots, None] * h
                                  + base[None, i:i + 8192])
        return out

    def _snapshot_links(self, X, base, slots, out):
        groups = {}  # slots sharing one snapshot are evaluated together
        for row, s in enumerate(slots):
            groups.setdefault(id(self.snapshots[s]), []).append((row, s))
        for members in groups.values():
            rows = [r for r, _ in members]
            sub = np.array([s for _, s in members])
            p = self.snapshots[sub[0]]
            for i in range(0, len(X), 8192):
                h, _ = interaction_forward(self.net, X[i:i + 8192], sub, p)
                out[rows, i:i + 8192] = (p["pair.b"][sub, None] + p["out.w"][sub, None] * h
                                         + base[None, i:i + 8192])
        return out


@dataclass
class ImportanceRow:
    pair: tuple[int, int]
    baseline_loss: float
    augmented_loss: float

    @property
    def delta(self) -> float:
        return self.baseline_loss - self.augmented_loss


@dataclass
class ImportanceTable:
    rows: list
    round: int = 1

    def __post_init__(self):
        self.rows = sorted(self.rows, key=lambda r: -r.delta)

    @property
    def top(self) -> tuple[int, int]:
        return self.rows[0].pair

    def rank_of(self, pair) -> int:
        """1-based rank of an unordered pair."""
        want = tuple(sorted(pair))
        for i, r in enumerate(self.rows, start=1):
            if r.pair == want:
                return i
        raise KeyError(pair)


def write_importance_csv(tables: list, path, names: Optional[list] = None, scale: float = 100.0) -> None:
    """CSV ``round, pair, baseline_loss, augmented_loss, delta`` with losses multiplied by ``scale``."""
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["round", "pair", "baseline_loss", "augmented_loss", "delta"])
        for t in tables:
            for r in t.rows:
                j, k = r.pair
                label = f"{names[j]}:{names[k]}" if names else f"{j + 1}:{k + 1}"
                w.writerow([t.round, label, format(r.baseline_loss * scale, ".10g"),
                            format(r.augmented_loss * scale, ".10g"), format(r.delta * scale, ".10g")])


def fit_diagonal_baseline(data: Dataset, cfg: TrainConfig, seed: int, pin_config: PinConfig,
                          scalers=None) -> tuple[PinModel, TrainHistory]:
    """Additive PIN: only the diagonal units ``h_ll`` carry output weights."""
    model = init_model(data.schema, pin_config, seed, scalers=scalers,
                       base_rate=data.N.sum() / data.v.sum(), active=diagonal_mask(data.schema.q))
    return train(data, model, cfg, seed)


def init_multioutput(baseline: PinModel, seed: int, terms=(), exclude=()) -> MultiOutputPin:
    """Freshly initialised interaction pathway with zero weights / bias offsets.

    Not warm-started from the baseline: its shared network is tuned for the
    diagonal units and leaves most off-diagonal units saturated, where the
    hard sigmoid passes no gradient.
    """
    net = init_model(baseline.schema, baseline.config, seed, scalers=baseline.scalers)
    net.pairs = baseline.pairs.copy()
    excluded = {frozenset(p) for p in exclude}
    active = np.array([a != b and frozenset((int(a), int(b))) not in excluded for a, b in net.pairs])
    if not active.any():
        raise ContractError("no candidate pairs left")
    net.set_active(active)
    net.params["out.w"][:] = 0.0
    net.params["out.b"][:] = 0.0
    return MultiOutputPin(baseline, list(terms), net, np.zeros(net.n_pairs))


def fit_multioutput(baseline: PinModel, data: Dataset, cfg: TrainConfig, seed: int,
                    terms=(), exclude=()) -> MultiOutputPin:
    """Jointly fit all candidate components on the summed deviance; the baseline stays frozen."""
    data = prepare(baseline, data)
    mo = init_multioutput(baseline, seed, terms, exclude)
    net = mo.net
    split_seed, shuffle_seed = np.random.SeedSequence([seed, 7]).spawn(2)
    tr, va = split(data, cfg.validation_fraction, int(split_seed.generate_state(1)[0]))
    base_tr = mo.base_link(tr.X)
    base_va = mo.base_link(va.X)
    X, N, v = tr.X, tr.N, tr.v

    params = net.params
    params["pair.b"] = mo.offsets
    slots = net.active_slots()
    best = np.full(net.n_pairs, np.inf)
    snapshots = {}

    def batch_grad(idx):
        return multioutput_backward(net, base_tr[idx], X[idx], N[idx], v[idx])

    def val_loss():
        # sum of per-component best-so-far losses: falls whenever any component improves
        mo.offsets = params["pair.b"]
        eta = mo.component_links(va.X, base_va)
        snap = None
        for s, e in zip(slots, eta):
            loss = deviance_from_link(e, va.Y, va.v)
            if loss < best[s] - cfg.min_delta:
                best[s] = loss
                snap = snap or {k: p.copy() for k, p in params.items()}
                snapshots[s] = snap
        return float(best[slots].sum())

    _, mo.history = optimize(params, batch_grad, val_loss, len(tr), cfg,
                             np.random.default_rng(shuffle_seed))
    params.pop("pair.b")
    if snapshots:
        mo.snapshots = snapshots
        mo.offsets = np.zeros(net.n_pairs)
        for s in slots:
            mo.offsets[s] = snapshots[s]["pair.b"][s]
    else:
        mo.offsets = np.zeros(net.n_pairs)
    return mo


def multioutput_backward(net: PinModel, base: np.ndarray, X: np.ndarray, N: np.ndarray,
                         v: np.ndarray) -> tuple[float, dict]:
    """Summed component deviance over the active slots of ``net`` and its gradient.

    ``net.params`` must hold the per-slot bias offsets under ``"pair.b"``;
    ``base`` is the frozen baseline link for the rows of ``X``.
    """
    params = net.params
    slots = net.active_slots()
    h, cache = interaction_forward(net, X, slots)
    w = params["out.w"][slots]
    eta = base[None, :] + params["pair.b"][slots, None] + w[:, None] * h
    Y = N / v
    loss = float(deviance_terms_from_link(eta, Y, v).mean(axis=1).sum())
    g_eta = 2.0 * v * (np.exp(eta) - Y) / len(X)
    grads = {k: np.zeros_like(p) for k, p in params.items()}
    grads.update(interaction_backward(net, cache, w[:, None] * g_eta))
    grads["out.w"][slots] = (g_eta * h).sum(axis=1)
    grads["pair.b"][slots] = g_eta.sum(axis=1)
    return loss, grads


def importance_scores(mo: MultiOutputPin, test: Dataset, round_: int = 1) -> ImportanceTable:
    """Held-out deviance decrease of every candidate component against the frozen baseline."""
    if len(test) == 0:
        raise ContractError("empty test set")
    test = prepare(mo.baseline, test)
    base = mo.base_link(test.X)
    base_loss = deviance_from_link(base, test.Y, test.v)
    comps = mo.component_links(test.X, base)
    rows = [ImportanceRow(pair, base_loss, deviance_from_link(e, test.Y, test.v))
            for pair, e in zip(mo.candidates, comps)]
    return ImportanceTable(rows, round_)


def freeze_term(mo: MultiOutputPin, pair) -> FrozenTerm:
    s = mo.net.slot(*pair)
    snap = mo.net.copy()
    if mo.snapshots is not None:
        snap.params = {k: v.copy() for k, v in mo.snapshots[s].items() if k != "pair.b"}
    active = np.zeros(snap.n_pairs, dtype=bool)
    active[s] = True
    snap.set_active(active)
    snap.params["out.b"][0] = mo.offsets[s]
    return FrozenTerm(tuple(sorted(int(p) for p in pair)), snap)


@dataclass
class SelectionResult:
    selected: list
    tables: list
    baseline: PinModel
    terms: list = field(default_factory=list)


def forward_select(learn: Dataset, test: Dataset, rounds: int, cfg: TrainConfig, seed: int,
                   pin_config: PinConfig = PinConfig(), scalers=None,
                   baseline: Optional[PinModel] = None) -> SelectionResult:
    """Greedy forward selection of interaction pairs, freezing each selected term."""
    q = learn.schema.q
    if rounds < 1 or rounds > q * (q - 1) // 2:
        raise ContractError(f"rounds must lie in 1..{q * (q - 1) // 2}")
    if baseline is None:
        baseline, _ = fit_diagonal_baseline(learn, cfg, seed, pin_config, scalers)
    selected, tables, terms = [], [], []
    for r in range(1, rounds + 1):
        round_seed = int(np.random.SeedSequence([seed, r]).generate_state(1)[0])
        mo = fit_multioutput(baseline, learn, cfg, round_seed, terms, exclude=selected)
        table = importance_scores(mo, test, r)
        tables.append(table)
        selected.append(table.top)
        terms.append(freeze_term(mo, table.top))
    return SelectionResult(selected, tables, baseline, terms)
