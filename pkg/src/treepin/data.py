"""Schema-driven CSV ingestion, min-max scaling and seeded validation splits."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np


class IngestionError(ValueError):
    pass


@dataclass(frozen=True)
class Feature:
    name: str
    kind: str  # "continuous" | "categorical"
    levels: tuple[str, ...] = ()

    def __post_init__(self):
        if self.kind not in ("continuous", "categorical"):
            raise ValueError(f"feature {self.name!r}: unknown kind {self.kind!r}")
        if self.kind == "categorical":
            if len(self.levels) == 0:
                raise ValueError(f"feature {self.name!r}: categorical needs a non-empty level list")
            if len(set(self.levels)) != len(self.levels):
                raise ValueError(f"feature {self.name!r}: duplicate levels")

    @property
    def is_categorical(self) -> bool:
        return self.kind == "categorical"

    @property
    def n_levels(self) -> int:
        return len(self.levels)


@dataclass(frozen=True)
class FeatureSchema:
    features: tuple[Feature, ...]
    exposure: str = "exposure"
    response: str = "response"
    count: Optional[str] = None

    def __post_init__(self):
        names = [f.name for f in self.features]
        if len(set(names)) != len(names):
            raise ValueError("feature names must be unique")
        if len(names) < 2:
            raise ValueError("a schema needs at least two features")

    @property
    def q(self) -> int:
        return len(self.features)

    @property
    def names(self) -> list[str]:
        return [f.name for f in self.features]

    def to_dict(self) -> dict:
        out = {
            "features": [
                {"name": f.name, "kind": f.kind, **({"levels": list(f.levels)} if f.is_categorical else {})}
                for f in self.features
            ],
            "exposure": self.exposure,
            "response": self.response,
        }
        if self.count is not None:
            out["count"] = self.count
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureSchema":
        feats = tuple(
            Feature(f["name"], f["kind"], tuple(str(v) for v in f.get("levels", ())))
            for f in d["features"]
        )
        return cls(feats, d.get("exposure", "exposure"), d.get("response", "response"), d.get("count"))

    @classmethod
    def from_json(cls, path) -> "FeatureSchema":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def permuted(self, perm: Sequence[int]) -> "FeatureSchema":
        return replace(self, features=tuple(self.features[i] for i in perm))


@dataclass
class Dataset:
    """Rows of features, claim counts and exposures.

    ``X`` has one column per schema feature; categorical columns hold level
    indices ``1..n_j`` stored as floats.
    """

    X: np.ndarray
    N: np.ndarray
    v: np.ndarray
    schema: FeatureSchema
    scaled: bool = False
    tags: dict = field(default_factory=dict)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.N = np.asarray(self.N, dtype=np.float64)
        self.v = np.asarray(self.v, dtype=np.float64)
        if self.X.ndim != 2 or self.X.shape[1] != self.schema.q:
            raise ValueError(f"X must have shape (n, {self.schema.q}), got {self.X.shape}")
        if not (len(self.N) == len(self.v) == len(self.X)):
            raise ValueError("X, N and v must have the same number of rows")
        if np.any(self.v <= 0):
            raise ValueError("non-positive exposure")
        if np.any(self.N < 0):
            raise ValueError("negative claim count")

    def __len__(self) -> int:
        return len(self.X)

    @property
    def Y(self) -> np.ndarray:
        return self.N / self.v

    def subset(self, idx) -> "Dataset":
        return Dataset(self.X[idx], self.N[idx], self.v[idx], self.schema, self.scaled, dict(self.tags))


def load_csv(path, schema: FeatureSchema) -> Dataset:
    """Parse a CSV file into an unscaled Dataset, validating every cell."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        needed = schema.names + [schema.exposure]
        needed.append(schema.count if schema.count is not None else schema.response)
        missing = [c for c in needed if c not in header]
        if missing:
            raise IngestionError(f"{path}: header is missing columns {missing}")
        level_maps = [
            {lvl: i + 1 for i, lvl in enumerate(f.levels)} if f.is_categorical else None
            for f in schema.features
        ]
        X, N, v = [], [], []
        for row_no, row in enumerate(reader, start=1):
            xs = []
            for f, lm in zip(schema.features, level_maps):
                raw = row[f.name].strip()
                if lm is not None:
                    if raw not in lm:
                        raise IngestionError(f"row {row_no}: unknown level {raw} in column {f.name}")
                    xs.append(float(lm[raw]))
                else:
                    xs.append(_parse_float(raw, row_no, f.name))
            expo = _parse_float(row[schema.exposure].strip(), row_no, schema.exposure)
            if expo <= 0:
                raise IngestionError(f"row {row_no}: non-positive exposure {expo}")
            if schema.count is not None:
                n = _parse_float(row[schema.count].strip(), row_no, schema.count)
            else:
                n = _parse_float(row[schema.response].strip(), row_no, schema.response) * expo
            if n < 0:
                raise IngestionError(f"row {row_no}: negative response in column {schema.count or schema.response}")
            X.append(xs)
            N.append(n)
            v.append(expo)
    if not X:
        raise IngestionError(f"{path}: no data rows")
    return Dataset(np.array(X), np.array(N), np.array(v), schema)


def _parse_float(raw: str, row_no: int, col: str) -> float:
    try:
        val = float(raw)
    except ValueError:
        raise IngestionError(f"row {row_no}: non-numeric value {raw!r} in column {col}") from None
    if not np.isfinite(val):
        raise IngestionError(f"row {row_no}: non-finite value {raw!r} in column {col}")
    return val


def write_csv(dataset: Dataset, path) -> None:
    """Write an unscaled dataset in the format ``load_csv`` reads (counts in the response column)."""
    schema = dataset.schema
    cols = schema.names + [schema.exposure, schema.count or schema.response]
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for x, n, expo in zip(dataset.X, dataset.N, dataset.v):
            cells = []
            for f, val in zip(schema.features, x):
                cells.append(f.levels[int(val) - 1] if f.is_categorical else repr(float(val)))
            resp = n if schema.count else n / expo
            w.writerow(cells + [repr(float(expo)), repr(float(resp))])


@dataclass(frozen=True)
class Scaler:
    lo: float
    hi: float

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValueError(f"constant column cannot be scaled (min={self.lo}, max={self.hi})")

    def apply(self, x: np.ndarray) -> np.ndarray:
        # affine onto [-1, 1]; values outside the fitted range extrapolate
        return 2.0 * (x - self.lo) / (self.hi - self.lo) - 1.0


def fit_scalers(dataset: Dataset) -> dict[str, Scaler]:
    scalers = {}
    for j, f in enumerate(dataset.schema.features):
        if f.is_categorical:
            continue
        col = dataset.X[:, j]
        try:
            scalers[f.name] = Scaler(float(col.min()), float(col.max()))
        except ValueError as exc:
            raise ValueError(f"column {f.name}: {exc}") from None
    return scalers


def apply_scalers(dataset: Dataset, scalers: dict[str, Scaler]) -> Dataset:
    if dataset.scaled:
        raise ValueError("dataset is already scaled")
    X = dataset.X.copy()
    for j, f in enumerate(dataset.schema.features):
        if not f.is_categorical:
            X[:, j] = scalers[f.name].apply(X[:, j])
    return Dataset(X, dataset.N, dataset.v, dataset.schema, True, dict(dataset.tags))


def fit_apply_scalers(dataset: Dataset) -> tuple[Dataset, dict[str, Scaler]]:
    scalers = fit_scalers(dataset)
    return apply_scalers(dataset, scalers), scalers


def split(dataset: Dataset, fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Uniform random (train, held-out) partition with ``round(n * fraction)`` held-out rows."""
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must lie in (0, 1)")
    n = len(dataset)
    if n == 0:
        raise ValueError("cannot split an empty dataset")
    n_out = int(round(n * fraction))
    perm = np.random.default_rng(seed).permutation(n)
    out_idx = np.sort(perm[:n_out])
    in_idx = np.sort(perm[n_out:])
    return dataset.subset(in_idx), dataset.subset(out_idx)
