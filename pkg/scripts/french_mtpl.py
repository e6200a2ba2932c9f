"""Ten-seed PIN run on the French MTPL claims-frequency data.

Expects already cleaned learning and test CSV files whose columns match
``configs/mtpl.json``: Area as an ordinal code, VehGas as a numeric
indicator and Density on the log scale, plus Exposure and ClaimNb.

    python scripts/french_mtpl.py --learn learn.csv --test test.csv --out runs/mtpl

Writes one model file per seed, a deviance summary (units 1e-2), the
interaction importance table and SHAP importance of the first model.
"""

import argparse
import json
import math
from pathlib import Path

import numpy as np

from treepin import shap
from treepin.cli import parse_seeds
from treepin.data import FeatureSchema, apply_scalers, fit_apply_scalers, load_csv
from treepin.importance import forward_select, write_importance_csv
from treepin.losses import deviance_from_link
from treepin.model import PinConfig, init_model, save_model
from treepin.training import TrainConfig, evaluate, null_link, train

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--learn", required=True)
    ap.add_argument("--test", required=True)
    ap.add_argument("--config", default=str(ROOT / "configs" / "mtpl.json"))
    ap.add_argument("--seeds", type=parse_seeds)
    ap.add_argument("--rounds", type=int, default=0, help="forward-selection rounds (0 = skip)")
    ap.add_argument("--shap-instances", type=int, default=100)
    ap.add_argument("--out", default="mtpl_run")
    args = ap.parse_args()

    cfg = json.loads(Path(args.config).read_text())
    schema = FeatureSchema.from_dict(cfg["schema"])
    pin = PinConfig(**cfg["pin"])
    tc = TrainConfig(**cfg.get("train", {}))
    seeds = args.seeds or list(tc.seeds)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    learn, scalers = fit_apply_scalers(load_csv(args.learn, schema))
    test = apply_scalers(load_csv(args.test, schema), scalers)
    print(f"learn {len(learn)} rows, test {len(test)} rows")
    null = deviance_from_link(np.full(len(test), null_link(learn)), test.Y, test.v)
    print(f"intercept-only test deviance {100 * null:.4f}")

    models, losses = [], []
    for seed in seeds:
        model = init_model(schema, pin, seed, scalers, base_rate=learn.N.sum() / learn.v.sum())
        model, hist = train(learn, model, tc, seed)
        save_model(model, out / f"pin_seed{seed}.json")
        hist.to_csv(out / f"pin_seed{seed}.history.csv")
        models.append(model)
        losses.append(evaluate(model, test))
        print(f"seed {seed}: epochs {len(hist.val_loss)}, test deviance {100 * losses[-1]:.4f}", flush=True)
    losses = np.array(losses)
    ens = evaluate(models, test)
    sd = losses.std(ddof=1) if len(losses) > 1 else math.nan
    summary = {"null": 100 * null, "mean": 100 * losses.mean(), "sd": 100 * sd, "ensemble": 100 * ens,
               "per_seed": [100 * x for x in losses]}
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    print(f"PIN mean {summary['mean']:.4f} +- {summary['sd']:.4f}, ensemble {summary['ensemble']:.4f}")

    if args.rounds:
        res = forward_select(learn, test, args.rounds, tc, seeds[0], pin, scalers)
        write_importance_csv(res.tables, out / "interaction_importance.csv", schema.names)
        print("selected pairs: " + ", ".join(f"{schema.names[j]}:{schema.names[k]}" for j, k in res.selected))

    if args.shap_instances:
        bg = shap.select_background(learn, 2000, seed=seeds[0])
        rows = learn.X[np.random.default_rng(seeds[0]).choice(len(learn), args.shap_instances, replace=False)]
        imp = shap.shap_importance(rows, models[0], bg)
        shap.write_importance_csv(schema.names, imp, out / "shap_importance.csv")
        for j in np.argsort(-imp):
            print(f"  {schema.names[j]:<12} {imp[j]:.4f}")


if __name__ == "__main__":
    main()
