"""Command-line front end.

Exit codes: 0 success, 1 validation error (bad config, infeasible ratio,
unknown target), 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import jsonschema

from . import experiments as ex
from .compress import InfeasibleRatioError, modules_from_bundle, modules_to_bundle
from .experiments import ConfigError
from .fisher import FisherWeights
from .tensor_io import load_bundle, save_bundle
from .toylm import TokenCorpus, ToyLM, ToyLMConfig, generate_corpus, make_eval_set, train_toylm

log = logging.getLogger("matcrush")

DEFAULT_TRAIN_TOKENS = 100_000
DEFAULT_TEST_TOKENS = 20_000


def _setup_logging() -> None:
    level = os.environ.get("MATCRUSH_LOG", "info").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(level=levels.get(level, logging.INFO), format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr)


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _read_config(path: str) -> dict:
    try:
        raw = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return ex.load_config(raw)


def _load_model(path: str) -> tuple[ToyLM, dict]:
    bundle = load_bundle(path)
    return ToyLM.from_bundle(bundle), bundle.manifest


def _corpus(args, manifest: dict | None = None) -> TokenCorpus:
    if getattr(args, "corpus", None):
        return TokenCorpus.load(args.corpus)
    if manifest is None:
        raise ConfigError("no corpus given")
    return ex.model_corpus(manifest)


def _fisher(args, model: ToyLM, manifest: dict, cfg: dict) -> FisherWeights | None:
    if not ex.needs_fisher(cfg):
        return None
    if getattr(args, "fisher", None):
        return FisherWeights.from_bundle(load_bundle(args.fisher))
    names = [n for _, group in ex.resolve_targets(model, cfg["targets"]) for n in group]
    fe = cfg["fisher_estimation"]
    log.info("estimating Fisher information for %d matrices", len(names))
    return ex.fisher_for(model, _corpus(args, manifest), names, fe["batches"], fe["batch_size"], fe["seed"])


# ---------------------------------------------------------------------------
# subcommands


def cmd_corpus_gen(args) -> int:
    corpus = generate_corpus(args.seed, args.train_tokens, args.test_tokens)
    corpus.save(args.out)
    log.info("wrote %s (%d train / %d test tokens, unigram entropy %.4f nats)",
             args.out, corpus.train.size, corpus.test.size, corpus.unigram_entropy)
    return 0


def cmd_toylm_train(args) -> int:
    if args.corpus:
        corpus = TokenCorpus.load(args.corpus)
    else:
        corpus = generate_corpus(args.seed, DEFAULT_TRAIN_TOKENS, DEFAULT_TEST_TOKENS)
    cfg = ToyLMConfig(seed=args.seed)
    model = train_toylm(corpus, cfg, args.steps, batch_size=args.batch_size,
                        log=lambda s, l: log.debug("step %d loss %.4f", s, l))
    extra = {"corpus": {"seed": corpus.seed, "train_tokens": int(corpus.train.size),
                        "test_tokens": int(corpus.test.size)},
             "train": {"steps": args.steps, "batch_size": args.batch_size}}
    save_bundle(model.to_bundle(extra), args.out)
    log.info("wrote %s", args.out)
    return 0


def cmd_fisher_estimate(args) -> int:
    model, manifest = _load_model(args.model)
    patterns = args.targets.split(",") if args.targets else ["*"]
    names = [n for _, group in ex.resolve_targets(model, patterns) for n in group]
    fw = ex.fisher_for(model, _corpus(args, manifest), names, args.batches, args.batch_size, args.seed)
    save_bundle(fw.to_bundle(), args.out)
    log.info("wrote %s (%d dataset units)", args.out, fw.sample_count)
    return 0


def cmd_compress(args) -> int:
    cfg = _read_config(args.config)
    model, manifest = _load_model(args.model)
    seed = args.seed if args.seed is not None else cfg["train"]["seeds"][0]
    cr = args.cr if args.cr is not None else cfg["target_cr"][0]
    fisher = _fisher(args, model, manifest, cfg)
    run = ex.compress_model(model, cfg, seed, cr, fisher, jobs=args.jobs)
    meta = {"config": cfg, "config_hash": ex.config_hash(cfg), "seed": seed, "target_cr": cr,
            "achieved_cr": run.original_count / run.parameter_count,
            "train_reports": [r.to_dict() for r in run.reports]}
    save_bundle(modules_to_bundle(run.modules, ex.to_jsonable(meta)), args.out)
    log.info("wrote %s (achieved CR %.4f)", args.out, meta["achieved_cr"])
    return 0


def cmd_eval(args) -> int:
    model, manifest = _load_model(args.model)
    zb = load_bundle(args.compressed)
    run = ex.CompressionRun(modules_from_bundle(zb), [], 0.0)
    eval_set = make_eval_set(_corpus(args, manifest).test, model.cfg, args.seed)
    res = ex.evaluate(model, run, eval_set)
    row = {"config_hash": zb.manifest.get("config_hash", ""), "seed": zb.manifest.get("seed"),
           "target_cr": zb.manifest.get("target_cr"), "eval_seed": args.seed, **res}
    if args.format == "json":
        _emit(json.dumps(row, sort_keys=True, indent=2) + "\n", args.out)
    else:
        flat = {k: v for k, v in row.items() if k != "rmse"}
        flat.update({f"rmse:{k}": v for k, v in res["rmse"].items()})
        keys = list(flat)
        _emit(",".join(keys) + "\n" + ",".join(str(flat[k]) for k in keys) + "\n", args.out)
    return 0


def cmd_sweep(args) -> int:
    cfg = _read_config(args.config)
    model, manifest = _load_model(args.model)
    eval_set = make_eval_set(_corpus(args, manifest).test, model.cfg, cfg["eval"]["seed"])
    fisher = _fisher(args, model, manifest, cfg)
    report = ex.run_sweep(model, eval_set, cfg, fisher, jobs=args.jobs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(ex.report_json(report))
    (out / "report.csv").write_text(ex.report_csv(report))
    for m in report["medians"]:
        log.info("target CR %g: median ppl %.4f (baseline %.4f)", m["target_cr"], m["ppl"], m["baseline_ppl"])
    return 0


def cmd_report(args) -> int:
    try:
        report = json.loads(Path(args.input).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read report {args.input}: {exc}") from exc
    report = ex.recompute_report(report)
    text = ex.report_json(report) if args.format == "json" else ex.report_csv(report)
    _emit(text, args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="matcrush", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    corpus = sub.add_parser("corpus").add_subparsers(dest="action", required=True)
    g = corpus.add_parser("gen", help="generate a synthetic token corpus")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--train-tokens", type=int, default=DEFAULT_TRAIN_TOKENS)
    g.add_argument("--test-tokens", type=int, default=DEFAULT_TEST_TOKENS)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_corpus_gen)

    toylm = sub.add_parser("toylm").add_subparsers(dest="action", required=True)
    t = toylm.add_parser("train", help="pre-train the toy masked LM")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--corpus")
    t.add_argument("--steps", type=int, default=2000)
    t.add_argument("--batch-size", type=int, default=16)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_toylm_train)

    fisher = sub.add_parser("fisher").add_subparsers(dest="action", required=True)
    f = fisher.add_parser("estimate", help="empirical Fisher information of target matrices")
    f.add_argument("--model", required=True)
    f.add_argument("--corpus")
    f.add_argument("--targets", help="comma-separated name patterns (default: all addressable)")
    f.add_argument("--batches", type=int, default=32)
    f.add_argument("--batch-size", type=int, default=16)
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_fisher_estimate)

    c = sub.add_parser("compress", help="compress model matrices per an experiment config")
    c.add_argument("--config", required=True)
    c.add_argument("--model", required=True)
    c.add_argument("--corpus")
    c.add_argument("--fisher")
    c.add_argument("--seed", type=int)
    c.add_argument("--cr", type=float, help="target CR (default: first entry of target_cr)")
    c.add_argument("--jobs", type=int, default=1)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_compress)

    e = sub.add_parser("eval", help="paired-mask perplexity of baseline vs compressed model")
    e.add_argument("--model", required=True)
    e.add_argument("--compressed", required=True)
    e.add_argument("--corpus")
    e.add_argument("--seed", type=int, default=0, help="mask seed")
    e.add_argument("--format", choices=("csv", "json"), default="json")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="grid over target CRs and seeds; writes report.json and report.csv")
    s.add_argument("--config", required=True)
    s.add_argument("--model", required=True)
    s.add_argument("--corpus")
    s.add_argument("--fisher")
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_sweep)

    r = sub.add_parser("report", help="re-emit a sweep report with recomputed medians")
    r.add_argument("--in", dest="input", required=True)
    r.add_argument("--format", choices=("csv", "json"), default="csv")
    r.add_argument("--out")
    r.set_defaults(func=cmd_report)
    return p


def run(argv: list[str] | None = None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    try:
        return args.func(args)
    except (ConfigError, InfeasibleRatioError, jsonschema.ValidationError, KeyError) as exc:
        log.error("%s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        log.error("%s: %s", type(exc).__name__, exc)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())
