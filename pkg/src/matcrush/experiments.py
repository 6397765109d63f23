"""Experiment configs and the compress -> substitute -> perplexity pipeline."""

from __future__ import annotations

import copy
import csv
import fnmatch
import hashlib
import io
import json
import logging
import statistics
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from importlib import resources
from typing import Any, Sequence

import jsonschema
import numpy as np

from .autodiff import AEArch, LossSpec, TrainConfig
from .compress import Module, ModuleGroup, compress_group, compression_ratio, materialize, member_names
from .fisher import FisherTransform, FisherWeights, estimate_fisher
from .linalg import rmse
from .toylm import EvalSet, TokenCorpus, ToyLM, fisher_oracle, generate_corpus, mlm_batches, perplexity, \
    substitute_many

log = logging.getLogger("matcrush")

SCHEMA: dict = json.loads(resources.files("matcrush").joinpath("experiment.schema.json").read_text())

DEFAULTS: dict = {
    "mode": "concatenated",
    "method": "ae",
    "arch": {"hidden": [], "activation": "leaky_relu", "preserve_norm": False, "bias": True},
    "loss": {"beta": 0.0, "fisher": None, "batch_norm": False},
    "train": {"lr": 1e-3, "steps": 20000, "batch_size": 256, "patience": 20, "eval_every": 100,
              "plateau_decay": 0.5, "max_decays": 10, "seeds": [0, 1, 2]},
    "fisher_estimation": {"batches": 32, "batch_size": 16, "seed": 0},
    "eval": {"seed": 0},
    "overrides": {},
}


class ConfigError(ValueError):
    pass


def _merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for key, val in extra.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict) and key != "overrides":
            out[key] = _merge(out[key], val)
        else:
            out[key] = copy.deepcopy(val)
    return out


def load_config(raw: dict | str) -> dict:
    """Validate against the published schema and fill defaults."""
    if isinstance(raw, str):
        try:
            raw = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
    try:
        jsonschema.validate(raw, SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"invalid config at {where}: {exc.message}") from exc
    cfg = _merge(DEFAULTS, raw)
    if not isinstance(cfg["target_cr"], list):
        cfg["target_cr"] = [cfg["target_cr"]]
    return cfg


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def group_settings(cfg: dict, pattern: str) -> dict:
    """Top-level settings with any per-pattern override applied."""
    over = cfg.get("overrides", {}).get(pattern, {})
    base = {k: cfg[k] for k in ("mode", "method", "arch", "loss", "train")}
    return _merge(base, over)


def make_transform(loss: dict) -> FisherTransform | None:
    f = loss.get("fisher")
    if f is None:
        return None
    return FisherTransform(f["kind"], exponent=f.get("exponent", 1.0), extra=f.get("extra", 0.0),
                           batch_norm=loss.get("batch_norm", False))


def make_arch(arch: dict, m: int) -> AEArch:
    if arch["hidden"]:
        return AEArch.mlp(m, 1, arch["hidden"], arch["activation"], arch["preserve_norm"], arch["bias"])
    return AEArch.linear(m, 1, arch["preserve_norm"], arch["bias"])


def make_train_config(train: dict, seed: int) -> TrainConfig:
    return TrainConfig(learning_rate=train["lr"], batch_size=train["batch_size"], max_steps=train["steps"],
                       patience=train["patience"], eval_every=train["eval_every"], seed=seed,
                       plateau_decay=train["plateau_decay"], max_decays=train["max_decays"])


def resolve_targets(model: ToyLM, patterns: Sequence[str]) -> list[tuple[str, list[str]]]:
    addressable = model.cfg.target_names()
    out, seen = [], set()
    for pat in patterns:
        names = [n for n in addressable if fnmatch.fnmatchcase(n, pat)]
        if not names:
            raise ConfigError(f"target pattern {pat!r} matches no addressable matrix")
        dup = seen.intersection(names)
        if dup:
            raise ConfigError(f"matrices {sorted(dup)} matched by more than one target pattern")
        seen.update(names)
        out.append((pat, names))
    return out


def needs_fisher(cfg: dict) -> bool:
    return any(group_settings(cfg, p)["loss"]["fisher"] is not None or group_settings(cfg, p)["method"] == "fwsvd"
               for p in cfg["targets"])


def fisher_for(model: ToyLM, corpus: TokenCorpus, names: Sequence[str], batches: int = 32,
               batch_size: int = 16, seed: int = 0) -> FisherWeights:
    data = mlm_batches(corpus.train, model.cfg, batches, batch_size, seed)
    return estimate_fisher(fisher_oracle(model, names), data, names)


def model_corpus(model_bundle_manifest: dict) -> TokenCorpus:
    c = model_bundle_manifest.get("corpus")
    if c is None:
        raise ConfigError("model bundle does not record its corpus; pass --corpus")
    return generate_corpus(c["seed"], c["train_tokens"], c["test_tokens"], vocab=model_bundle_manifest["config"]["vocab"])


@dataclass
class CompressionRun:
    modules: list[Module]
    reports: list
    seconds: float

    @property
    def original_count(self) -> int:
        total = 0
        for mod in self.modules:
            shape = mod.original_shape if hasattr(mod, "original_shape") else mod.shape
            total += shape[0] * shape[1]
        return total

    @property
    def parameter_count(self) -> int:
        return sum(m.parameter_count for m in self.modules)

    def replacements(self) -> dict[str, np.ndarray]:
        out = {}
        for mod in self.modules:
            for name in member_names(mod):
                out[name] = materialize(mod, name)
        return out


def compress_model(model: ToyLM, cfg: dict, seed: int, target_cr: float,
                   fisher: FisherWeights | None = None, jobs: int = 1) -> CompressionRun:
    modules, reports, seconds = [], [], 0.0
    for pattern, names in resolve_targets(model, cfg["targets"]):
        s = group_settings(cfg, pattern)
        group = ModuleGroup([(n, model.params[n]) for n in names], s["mode"], label=pattern if len(names) > 1 else None)
        transform = make_transform(s["loss"])
        use_fisher = fisher if (transform is not None or s["method"] == "fwsvd") else None
        if use_fisher is None and (transform is not None or s["method"] == "fwsvd"):
            raise ConfigError(f"group {pattern!r} needs Fisher weights")
        mods, reps, secs = compress_group(
            group, s["method"], target_cr,
            arch=make_arch(s["arch"], group.cols),
            spec=LossSpec(s["loss"]["beta"], None, s["loss"]["batch_norm"]),
            cfg=make_train_config(s["train"], seed),
            fisher=use_fisher, transform=transform, jobs=jobs)
        modules += mods
        reports += reps
        seconds += secs
    return CompressionRun(modules, reports, seconds)


def evaluate(model: ToyLM, run: CompressionRun, eval_set: EvalSet, baseline: float | None = None) -> dict:
    subs = run.replacements()
    compressed = substitute_many(model, subs)
    errors = {name: rmse(model.params[name], mat) for name, mat in subs.items()}
    return {
        "baseline_ppl": perplexity(model, eval_set) if baseline is None else baseline,
        "ppl": perplexity(compressed, eval_set),
        "achieved_cr": run.original_count / run.parameter_count,
        "min_module_cr": float(min(compression_ratio(m) for m in run.modules)),
        "param_count": run.parameter_count,
        "rmse": {k: errors[k] for k in sorted(errors)},
    }


# ---------------------------------------------------------------------------
# sweeps and reports

METRICS = ("ppl", "baseline_ppl", "achieved_cr", "min_module_cr", "mean_rmse")


def run_sweep(model: ToyLM, eval_set: EvalSet, cfg: dict, fisher: FisherWeights | None = None,
              jobs: int = 1) -> dict:
    """Every (target_cr, seed) grid point, plus per-CR medians over seeds."""
    chash = config_hash(cfg)
    baseline = perplexity(model, eval_set)
    grid = [(cr, seed) for cr in cfg["target_cr"] for seed in cfg["train"]["seeds"]]

    def point(item):
        cr, seed = item
        run = compress_model(model, cfg, seed, cr, fisher)
        res = evaluate(model, run, eval_set, baseline)
        log.info("cr=%g seed=%d ppl=%.4f", cr, seed, res["ppl"])
        return {"config_hash": chash, "target_cr": cr, "seed": seed, "baseline_ppl": res["baseline_ppl"],
                "ppl": res["ppl"], "achieved_cr": res["achieved_cr"], "min_module_cr": res["min_module_cr"],
                "param_count": res["param_count"], "mean_rmse": float(np.mean(list(res["rmse"].values())))}

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(point, grid))
    else:
        rows = [point(g) for g in grid]
    rows.sort(key=lambda r: (r["target_cr"], r["seed"]))
    return {"config": cfg, "config_hash": chash, "rows": rows, "medians": medians(rows)}


def medians(rows: list[dict]) -> list[dict]:
    out = []
    for cr in sorted({r["target_cr"] for r in rows}):
        sub = [r for r in rows if r["target_cr"] == cr]
        agg = {"config_hash": sub[0]["config_hash"], "target_cr": cr, "seeds": [r["seed"] for r in sub]}
        for key in METRICS:
            agg[key] = statistics.median(r[key] for r in sub)
        out.append(agg)
    return out


CSV_FIELDS = ("aggregate", "config_hash", "target_cr", "seed", "ppl", "baseline_ppl", "achieved_cr",
              "min_module_cr", "mean_rmse", "param_count")


def report_csv(report: dict) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_FIELDS, extrasaction="ignore", lineterminator="\n")
    writer.writeheader()
    for r in report["rows"]:
        writer.writerow({"aggregate": "seed", **r})
    for m in report["medians"]:
        writer.writerow({"aggregate": "median", **m, "seed": "+".join(map(str, m["seeds"])), "param_count": ""})
    return buf.getvalue()


def report_json(report: dict) -> str:
    return json.dumps(report, sort_keys=True, indent=2) + "\n"


def recompute_report(report: dict) -> dict:
    """Re-derive the median rows from the per-seed rows of an existing report."""
    out = dict(report)
    out["medians"] = medians(report["rows"])
    return out


def to_jsonable(x: Any) -> Any:
    if isinstance(x, dict):
        return {k: to_jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [to_jsonable(v) for v in x]
    if isinstance(x, np.generic):
        return x.item()
    return x
