"""Command-line interface: ``treepin <command> [options]``.

Exit codes: 0 success, 1 usage error, 2 data or contract error. Losses are
printed in units of 10^-2. Every command writes a ``*.manifest.json`` next to
its main output.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from . import shap as shap_mod
from .data import FeatureSchema, IngestionError, apply_scalers, fit_apply_scalers, load_csv, write_csv
from .importance import forward_select, write_importance_csv
from .losses import deviance_from_link
from .model import (ModelLoadError, PinConfig, PinModel, SchemaMismatchError, init_model, load_model,
                    parameter_count, predict_grid, prepare, save_model, triangular_pairs)
from .numeric import ContractError
from .synth import GeneratorSpec, generate
from .training import TrainConfig, TrainingError, ensemble_predict, evaluate, null_link, train

log = logging.getLogger("treepin")

DATA_ERRORS = (IngestionError, ContractError, ModelLoadError, SchemaMismatchError, TrainingError,
               ValueError, KeyError, OSError, FloatingPointError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# ---------------------------------------------------------------------------
# run manifest


@dataclass
class RunManifest:
    command: str
    argv: list
    config_paths: dict = field(default_factory=dict)
    seeds: list = field(default_factory=list)
    started: str = ""
    finished: str = ""
    outputs: list = field(default_factory=list)
    version: str = __version__

    def write(self, path) -> Path:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(json.dumps(asdict(self), indent=2))
        tmp.replace(path)
        return path


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _manifest_path(out: Path) -> Path:
    out = Path(out)
    if out.is_dir():
        return out / "manifest.json"
    return out.with_name(out.stem + ".manifest.json")


# ---------------------------------------------------------------------------
# argument helpers


def parse_seeds(text: str) -> list[int]:
    """``"3"``, ``"1,4,7"`` or an inclusive range ``"1..10"``."""
    text = text.strip()
    try:
        if ".." in text:
            lo, hi = text.split("..")
            seeds = list(range(int(lo), int(hi) + 1))
        else:
            seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid seed list {text!r}") from None
    if not seeds:
        raise argparse.ArgumentTypeError("empty seed list")
    return seeds


def load_run_config(path: Optional[str]) -> dict:
    """Run config JSON with optional ``schema``, ``pin`` and ``train`` sections."""
    if path is None:
        return {}
    cfg = json.loads(Path(path).read_text())
    unknown = set(cfg) - {"schema", "pin", "train"}
    if unknown:
        raise ValueError(f"{path}: unknown config sections {sorted(unknown)}")
    return cfg


def _schema(args, cfg: dict) -> FeatureSchema:
    if getattr(args, "schema", None):
        return FeatureSchema.from_json(args.schema)
    if "schema" in cfg:
        return FeatureSchema.from_dict(cfg["schema"])
    guess = Path(args.data).with_suffix(".schema.json")
    if guess.exists():
        return FeatureSchema.from_json(guess)
    raise ValueError("no schema: pass --schema or a --config with a schema section")


def _train_config(cfg: dict, args) -> TrainConfig:
    tc = TrainConfig(**cfg.get("train", {}))
    if getattr(args, "max_epochs", None) is not None:
        tc = TrainConfig(**{**asdict(tc), "max_epochs": args.max_epochs})
    return tc


def _feature_index(schema: FeatureSchema, token: str) -> int:
    if token in schema.names:
        return schema.names.index(token)
    try:
        j = int(token) - 1
    except ValueError:
        raise ContractError(f"unknown feature {token!r}") from None
    if not 0 <= j < schema.q:
        raise ContractError(f"feature index {token} outside 1..{schema.q}")
    return j


def active_mask(spec: str, schema: FeatureSchema) -> np.ndarray:
    """``full``, ``diagonal`` or a pair list ``"A:B,C:D"`` (diagonal units always kept)."""
    pairs = triangular_pairs(schema.q)
    if spec == "full":
        return np.ones(len(pairs), dtype=bool)
    active = pairs[:, 0] == pairs[:, 1]
    if spec == "diagonal":
        return active
    for item in spec.split(","):
        a, _, b = item.partition(":")
        j, k = sorted((_feature_index(schema, a.strip()), _feature_index(schema, b.strip())))
        active[np.flatnonzero((pairs[:, 0] == j) & (pairs[:, 1] == k))] = True
    return active


def _out(x: float) -> str:
    return f"{100 * x:.4f}"


def _parallel_map(fn, items, jobs: int):
    if jobs <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, items))


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args, man: RunManifest) -> int:
    spec = GeneratorSpec.from_json(args.spec)
    if args.seed is not None:
        spec.seed = args.seed
    if args.n is not None:
        spec.n = args.n
    data, oracle = generate(spec)
    out = Path(args.out)
    write_csv(data, out)
    schema_path = out.with_suffix(".schema.json")
    schema_path.write_text(json.dumps(data.schema.to_dict(), indent=2))
    oracle_path = out.with_suffix(".oracle.json")
    oracle_path.write_text(json.dumps(oracle))
    man.config_paths["spec"] = args.spec
    man.seeds = [spec.seed]
    man.outputs += [str(out), str(schema_path), str(oracle_path)]
    print(f"rows {len(data)}  claims {int(data.N.sum())}  exposure {data.v.sum():.1f}")
    print(f"oracle deviance  true {_out(oracle['true_deviance_mc'])}  additive {_out(oracle['additive_deviance_mc'])}"
          f"  null {_out(oracle['null_deviance_mc'])}  (x1e-2)")
    return 0


def _train_one(job):
    data, scalers, pin, tc, seed, active, validation = job
    model = init_model(data.schema, pin, seed, scalers=scalers,
                       base_rate=data.N.sum() / data.v.sum(), active=active)
    return train(data, model, tc, seed, validation)


def cmd_train(args, man: RunManifest) -> int:
    cfg = load_run_config(args.config)
    schema = _schema(args, cfg)
    pin = PinConfig(**cfg.get("pin", {}))
    tc = _train_config(cfg, args)
    seeds = args.seeds or ([args.seed] if args.seed is not None else [1])
    raw = load_csv(args.data, schema)
    data, scalers = fit_apply_scalers(raw)
    validation = load_csv(args.validation, schema) if args.validation else None
    active = active_mask(args.active, schema)
    jobs = [(data, scalers, pin, tc, s, active, validation) for s in seeds]
    results = _parallel_map(_train_one, jobs, args.jobs)
    out = Path(args.out)
    for s, (model, hist) in zip(seeds, results):
        path = out if len(seeds) == 1 else out.with_name(f"{out.stem}.seed{s}{out.suffix}")
        save_model(model, path)
        hist_path = path.with_suffix(".history.csv")
        hist.to_csv(hist_path)
        man.outputs += [str(path), str(hist_path)]
        best = min(hist.val_loss) if hist.val_loss else float("nan")
        print(f"seed {s}: epochs {len(hist.val_loss)}  best epoch {hist.best_epoch}  "
              f"validation deviance {_out(best)} x1e-2  -> {path}")
    man.config_paths = {k: v for k, v in (("config", args.config), ("schema", args.schema)) if v}
    man.seeds = list(seeds)
    return 0


def _load_models(paths) -> list[PinModel]:
    models = [load_model(p) for p in paths]
    for m in models[1:]:
        if m.schema != models[0].schema:
            raise SchemaMismatchError("models were fitted on different schemas")
    return models


def cmd_evaluate(args, man: RunManifest) -> int:
    models = _load_models(args.model)
    data = load_csv(args.data, models[0].schema)
    losses = []
    for path, m in zip(args.model, models):
        losses.append(evaluate(m, data))
        print(f"{path}: {_out(losses[-1])}")
    if len(models) > 1:
        arr = np.array(losses)
        se = arr.std(ddof=1) / math.sqrt(len(arr))
        ens = evaluate(models, data)
        print(f"mean {_out(arr.mean())} +- {_out(se)} (standard error)")
        print(f"ensemble {_out(ens)}")
    ref = load_csv(args.learn, models[0].schema) if args.learn else data
    null = deviance_from_link(np.full(len(data), null_link(ref)), data.Y, data.v)
    print(f"intercept-only {_out(null)}")
    print("(Poisson deviance, x1e-2)")
    man.seeds = [m.seeds.get("train") for m in models]
    return 0


def cmd_predict(args, man: RunManifest) -> int:
    models = _load_models(args.model)
    data = load_csv(args.data, models[0].schema)
    pred = ensemble_predict(models, prepare(models[0], data).X)
    out = Path(args.out)
    with out.open("w") as fh:
        fh.write("row,prediction\n")
        for i, p in enumerate(pred, start=1):
            fh.write(f"{i},{p:.17g}\n")
    man.outputs.append(str(out))
    print(f"wrote {len(pred)} predictions to {out}")
    return 0


def _selection(args, man: RunManifest, rounds: int) -> int:
    cfg = load_run_config(args.config)
    schema = _schema(args, cfg)
    pin = PinConfig(**cfg.get("pin", {}))
    tc = _train_config(cfg, args)
    learn, scalers = fit_apply_scalers(load_csv(args.data, schema))
    test = apply_scalers(load_csv(args.test, schema), scalers)
    seed = args.seed if args.seed is not None else 1
    res = forward_select(learn, test, rounds, tc, seed, pin, scalers)
    out = Path(args.out)
    write_importance_csv(res.tables, out, schema.names)
    for t in res.tables:
        print(f"round {t.round}: baseline {_out(t.rows[0].baseline_loss)}")
        for r in t.rows[:args.show]:
            j, k = r.pair
            print(f"  {schema.names[j]}:{schema.names[k]}  delta {_out(r.delta)}")
    print("selected: " + ", ".join(f"{schema.names[j]}:{schema.names[k]}" for j, k in res.selected))
    print("(deviance and deltas x1e-2)")
    man.seeds = [seed]
    man.outputs.append(str(out))
    return 0


def cmd_importance(args, man: RunManifest) -> int:
    return _selection(args, man, 1)


def cmd_select(args, man: RunManifest) -> int:
    return _selection(args, man, args.rounds)


def _explain_chunk(job):
    model, bg_rows, rows = job
    bg = shap_mod.Background(model, bg_rows)
    return [shap_mod.shapley_paired_permutation(x, model, bg) for x in rows]


def cmd_shap(args, man: RunManifest) -> int:
    model = load_model(args.model)
    data = prepare(model, load_csv(args.data, model.schema))
    seed = args.seed if args.seed is not None else 1
    rng = np.random.default_rng(seed)
    bg_rows = shap_mod.select_background(data, args.background, seed)
    n_inst = min(args.instances, len(data))
    inst_idx = np.sort(rng.choice(len(data), size=n_inst, replace=False))
    rows = data.X[inst_idx]
    start = time.perf_counter()
    chunks = np.array_split(np.arange(n_inst), max(1, min(args.jobs, n_inst)))
    parts = _parallel_map(_explain_chunk, [(model, bg_rows, rows[c]) for c in chunks], args.jobs)
    reports = [r for p in parts for r in p]
    elapsed = time.perf_counter() - start
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    names = model.schema.names
    for i, rep in zip(inst_idx, reports):
        rep.instance_id = int(i) + 1
        path = out / f"instance_{int(i) + 1}.csv"
        shap_mod.write_report_csv(rep, path, names)
        man.outputs.append(str(path))
    importance = shap_mod.shap_importance(rows, model, bg_rows, reports)
    shap_mod.write_importance_csv(names, importance, out / "importance.csv")
    raw = load_csv(args.data, model.schema).X[inst_idx]
    with (out / "dependence.csv").open("w") as fh:
        fh.write(",".join(["row"] + [f"x_{n}" for n in names] + [f"psi_{n}" for n in names]) + "\n")
        for i, x, rep in zip(inst_idx, raw, reports):
            fh.write(",".join([str(int(i) + 1)] + [f"{v:.17g}" for v in x] + [f"{p:.17g}" for p in rep.psi]) + "\n")
    man.outputs += [str(out / "importance.csv"), str(out / "dependence.csv")]
    man.seeds = [seed]
    gap = max(abs(r.efficiency_gap) for r in reports)
    print(f"explained {n_inst} instances with |B|={len(bg_rows)} in {elapsed:.2f} s "
          f"(max efficiency gap {gap:.1e})")
    print("contributions are on the link (log-frequency) scale; exp() gives multiplicative factors")
    for j in np.argsort(-importance):
        print(f"  {names[j]:<16} {importance[j]:.6f}")
    return 0


def cmd_grid(args, man: RunManifest) -> int:
    model = load_model(args.model)
    raw = load_csv(args.data, model.schema)
    data = prepare(model, raw)
    a, b = (_feature_index(model.schema, t) for t in args.features)
    seed = args.seed if args.seed is not None else 1
    bg = shap_mod.select_background(data, args.rows, seed)
    # continuous axes span the full scaled range; categorical axes ignore it
    grid = predict_grid(model, a, b, args.resolution, bg, [(-1.0, 1.0), (-1.0, 1.0)])
    # report continuous axes on the original scale
    for col, j in ((0, a), (1, b)):
        f = model.schema.features[j]
        if not f.is_categorical and f.name in model.scalers:
            s = model.scalers[f.name]
            grid[:, col] = s.lo + (grid[:, col] + 1.0) * (s.hi - s.lo) / 2.0
    out = Path(args.out)
    names = model.schema.names
    with out.open("w") as fh:
        fh.write(f"{names[a]},{names[b]},mean_prediction\n")
        for ga, gb, val in grid:
            fh.write(f"{ga:.17g},{gb:.17g},{val:.17g}\n")
    man.outputs.append(str(out))
    man.seeds = [seed]
    print(f"wrote {len(grid)} grid cells to {out}")
    return 0


def cmd_inspect(args, man: RunManifest) -> int:
    if args.model:
        model = load_model(args.model)
        schema, pin = model.schema, model.config
        print(f"model {args.model}: seeds {model.seeds}, active pairs {int(model.active.sum())}/{model.n_pairs}")
    else:
        cfg = load_run_config(args.config)
        if "schema" not in cfg:
            raise ValueError("inspect needs a config with a schema section, or --model")
        schema, pin = FeatureSchema.from_dict(cfg["schema"]), PinConfig(**cfg.get("pin", {}))
    print(f"q={schema.q}  d={pin.d}  d'={pin.d_hidden}  d0={pin.d0}  d1={pin.d1}  d2={pin.d2}")
    counts = parameter_count(pin, schema)
    labels = {
        "continuous": "continuous embeddings",
        "categorical": "categorical embeddings",
        "tokens": "interaction tokens",
        "layer1": "interaction layer 1",
        "layer2": "interaction layer 2",
        "output_layer": "interaction output",
        "output_weights": "output weights + bias",
    }
    for key, label in labels.items():
        print(f"{label:<24}{counts[key]:>8}")
    print(f"total {counts['total']}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="treepin", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def seeded(sp, multi=False):
        sp.add_argument("--seed", type=int, help="single run seed")
        if multi:
            sp.add_argument("--seeds", type=parse_seeds, help="seed list, e.g. 1..10")
        sp.add_argument("--jobs", type=int, default=1, help="worker processes")

    s = sub.add_parser("synth", help="generate synthetic data with planted interactions")
    s.add_argument("--spec", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int)
    seeded(s)

    s = sub.add_parser("train", help="fit one PIN per seed")
    s.add_argument("--data", required=True)
    s.add_argument("--schema")
    s.add_argument("--config")
    s.add_argument("--validation", help="explicit validation CSV (default: seeded split)")
    s.add_argument("--active", default="full", help="full | diagonal | pair list A:B,C:D")
    s.add_argument("--max-epochs", type=int)
    s.add_argument("--out", required=True)
    seeded(s, multi=True)

    s = sub.add_parser("evaluate", help="out-of-sample Poisson deviance")
    s.add_argument("--model", required=True, nargs="+")
    s.add_argument("--data", required=True)
    s.add_argument("--learn", help="learning data for the intercept-only reference")

    s = sub.add_parser("predict", help="frequency predictions (ensemble mean for several models)")
    s.add_argument("--model", required=True, nargs="+")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)

    for name, fn_help in (("importance", "one round of pair importance"), ("select", "forward selection")):
        s = sub.add_parser(name, help=fn_help)
        s.add_argument("--data", required=True, help="learning CSV")
        s.add_argument("--test", required=True, help="held-out CSV used for the deltas")
        s.add_argument("--schema")
        s.add_argument("--config")
        s.add_argument("--max-epochs", type=int)
        s.add_argument("--show", type=int, default=5, help="rows printed per round")
        s.add_argument("--out", required=True)
        if name == "select":
            s.add_argument("--rounds", type=int, default=2)
        seeded(s)

    s = sub.add_parser("shap", help="paired-permutation Shapley values")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--background", type=int, default=2000)
    s.add_argument("--instances", type=int, default=100)
    s.add_argument("--out", required=True, help="output directory")
    seeded(s)

    s = sub.add_parser("grid", help="two-feature marginal plot data")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--features", required=True, nargs=2, metavar=("A", "B"))
    s.add_argument("--resolution", type=int, default=21)
    s.add_argument("--rows", type=int, default=2000, help="background rows averaged per cell")
    s.add_argument("--out", required=True)
    seeded(s)

    s = sub.add_parser("inspect", help="parameter accounting")
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--config")
    g.add_argument("--model")
    return p


COMMANDS = {
    "synth": cmd_synth, "train": cmd_train, "evaluate": cmd_evaluate, "predict": cmd_predict,
    "importance": cmd_importance, "select": cmd_select, "shap": cmd_shap, "grid": cmd_grid,
    "inspect": cmd_inspect,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "jobs", 1) < 1:
        print("treepin: error: --jobs must be >= 1", file=sys.stderr)
        return 1
    man = RunManifest(args.command, argv, started=_now())
    try:
        code = COMMANDS[args.command](args, man)
    except DATA_ERRORS as exc:
        print(f"treepin {args.command}: error: {exc}", file=sys.stderr)
        return 2
    man.finished = _now()
    if getattr(args, "out", None):
        man.write(_manifest_path(Path(args.out)))
    return code


if __name__ == "__main__":
    sys.exit(main())
