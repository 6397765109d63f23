"""Directional toy-LM experiments: Fisher weighting, concatenated mode, baselines.

    python3 scripts/directional.py --model model.mcr [--which fisher,concat,baselines]

Prints one table per experiment (median over seeds).
"""

import argparse
import statistics
import time

import numpy as np

from matcrush import experiments as ex
from matcrush.compress import compress_kronecker, materialize
from matcrush.linalg import rmse
from matcrush.tensor_io import load_bundle
from matcrush.toylm import ToyLM, make_eval_set

SEEDS = (0, 1, 2)
TRAIN = {"lr": 1e-2, "steps": 4000, "batch_size": 64, "patience": 10, "eval_every": 50}

LINEAR = {"hidden": [], "bias": False}


def fisher_loss(exponent):
    return {"beta": 0.0, "fisher": {"kind": "power", "exponent": exponent}, "batch_norm": True}


FISHER_EXP = {
    "plain": {"targets": ["tok_emb"], "arch": LINEAR, "loss": {"beta": 0.0}},
    "fisher": {"targets": ["tok_emb"], "arch": LINEAR, "loss": fisher_loss(0.5)},
}
CONCAT_EXP = {
    mode: {"targets": ["layer.*.key"], "mode": mode, "arch": LINEAR, "loss": fisher_loss(0.5)}
    for mode in ("concatenated", "separated")
}
BASELINE_TARGETS = ["tok_emb", "layer.*.key", "layer.*.out_dense"]
BASELINE_EXP = {
    "ae": {"targets": BASELINE_TARGETS, "arch": LINEAR, "loss": fisher_loss(1.0)},
    "svd": {"targets": BASELINE_TARGETS, "method": "svd"},
    "prune": {"targets": BASELINE_TARGETS, "method": "prune"},
}


def config(raw, seeds=SEEDS, train=TRAIN):
    raw = dict(raw)
    raw.setdefault("target_cr", 10)
    raw["train"] = {**train, "seeds": list(seeds), **raw.get("train", {})}
    return ex.load_config(raw)


def compare(model, eval_set, corpus, table, cr, seeds=SEEDS, train=TRAIN):
    """{label: {"ppl": median, "seconds": median, "runs": [...]}} for each config in ``table``."""
    baseline = ex.perplexity(model, eval_set)
    fisher = None
    out = {}
    for label, raw in table.items():
        cfg = config(raw, seeds, train)
        if ex.needs_fisher(cfg) and fisher is None:
            names = [n for _, g in ex.resolve_targets(model, BASELINE_TARGETS) for n in g]
            fisher = ex.fisher_for(model, corpus, names)
        runs = []
        for seed in seeds:
            t0 = time.perf_counter()
            run = ex.compress_model(model, cfg, seed, cr, fisher)
            wall = time.perf_counter() - t0
            res = ex.evaluate(model, run, eval_set, baseline)
            res.update(seconds=run.seconds, wall=wall, run=run)
            runs.append(res)
        out[label] = {"ppl": statistics.median(r["ppl"] for r in runs),
                      "seconds": statistics.median(r["seconds"] for r in runs),
                      "rmse": statistics.median(float(np.mean(list(r["rmse"].values()))) for r in runs),
                      "baseline": baseline, "runs": runs}
    return out


def kronecker_rmse(model, names, cr, seed=0):
    cfg = ex.make_train_config(ex.load_config({"targets": names, "target_cr": cr, "train": TRAIN})["train"], seed)
    return {n: rmse(model.params[n], materialize(compress_kronecker(model.params[n], cr, cfg)))
            for n in names}


def show(title, res):
    print(f"\n{title}")
    for label, r in res.items():
        print(f"  {label:<14} ppl {r['ppl']:9.4f}  mean rmse {r['rmse']:.5f}  "
              f"train s {r['seconds']:7.2f}  (baseline {r['baseline']:.4f})")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--model", required=True)
    ap.add_argument("--which", default="fisher,concat,baselines")
    args = ap.parse_args()
    bundle = load_bundle(args.model)
    model = ToyLM.from_bundle(bundle)
    corpus = ex.model_corpus(bundle.manifest)
    eval_set = make_eval_set(corpus.test, model.cfg, 0)
    which = args.which.split(",")
    if "fisher" in which:
        show("tok_emb @ CR 10: Fisher x^0.5 + BN vs none", compare(model, eval_set, corpus, FISHER_EXP, 10))
    if "concat" in which:
        show("keys @ CR 10: concatenated vs separated", compare(model, eval_set, corpus, CONCAT_EXP, 10))
    if "baselines" in which:
        res = compare(model, eval_set, corpus, BASELINE_EXP, 25)
        show("tok_emb + keys + out_dense @ CR 25", res)
        names = sorted(res["ae"]["runs"][0]["rmse"])
        kr = kronecker_rmse(model, names, 25)
        ae = res["ae"]["runs"][0]["rmse"]
        for n in names:
            print(f"  {n:<22} kron rmse {kr[n]:.5f}  ae rmse {ae[n]:.5f}")


if __name__ == "__main__":
    main()
