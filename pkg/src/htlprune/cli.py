"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 runtime or numeric error,
4 I/O error. Failures print one JSON error record to stderr (and to
``error.json`` in the output directory when one is known).

Set ``HTLPRUNE_THREADS`` to cap BLAS threads.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import checkpoint, config as config_mod, data, mining, pipeline, pruning, reporting
from .checkpoint import CheckpointError
from .config import ConfigValidationError
from .tensor import NumericError
from .unet import ConfigError, UsageError

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_IO = 0, 2, 3, 4

log = logging.getLogger("htlprune")


def _add_config(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default="desk", help="TOML run config, or a bundled name (desk, smoke)")
    p.add_argument("--seed", type=int, help="run seed (default: first of the config's seeds)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config field, e.g. --set mining.tau=0.3 (value parsed as TOML)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="htlprune", description="Pruning-assisted hard-to-learn sample mining")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write the synthetic corpus")
    _add_config(p)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train the base model and write a checkpoint")
    _add_config(p)
    p.add_argument("--out", required=True)

    p = sub.add_parser("prune", help="compute a prune mask and print its sparsity")
    _add_config(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--method", choices=pruning.METHODS)
    p.add_argument("--ratio", type=float)
    p.add_argument("--out", help="checkpoint directory for weights + mask (default: <checkpoint>-pruned)")

    p = sub.add_parser("mine", help="mine HTL samples with the configured setting")
    _add_config(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--tau", type=float)
    p.add_argument("--ratio", type=float)

    p = sub.add_parser("finetune", help="fine-tune a checkpoint on mined HTL samples")
    _add_config(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--htl", required=True, help="HTL CSV written by `mine`")
    p.add_argument("--baseline", choices=config_mod.BASELINES,
                   help="fine-tune on an equal-size baseline sample instead of the HTL set")
    p.add_argument("--out", required=True)

    p = sub.add_parser("evaluate", help="held-out metrics of a checkpoint")
    _add_config(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=pipeline.SPLITS, default="test")
    p.add_argument("--out", help="JSON output path (default: stdout only)")

    p = sub.add_parser("report", help="aggregate a run directory into report tables")
    p.add_argument("--run-dir", required=True)

    p = sub.add_parser("pipeline", help="run every stage for every seed")
    _add_config(p)
    p.add_argument("--out", help="run directory (default: the config's output_dir)")
    return ap


def _parse_value(text: str):
    try:
        return config_mod.tomllib.loads(f"v = {text}")["v"]
    except config_mod.tomllib.TOMLDecodeError:
        return text


def _load(args, extra: dict | None = None, check_paths: bool = True):
    overrides = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigValidationError([f"--set {item!r}: expected KEY=VALUE"])
        overrides[key.strip()] = _parse_value(value.strip())
    overrides.update(extra or {})
    return config_mod.load_config(args.config, overrides, check_paths=check_paths)


def _seed(args, cfg) -> int:
    return args.seed if args.seed is not None else cfg.seeds[0]


def _run_dir_for(cfg, out) -> Path:
    return Path(out) if out else Path(cfg.output_dir)


def _splits(cfg, run_dir):
    return pipeline.split_corpus(cfg, pipeline.load_corpus(cfg, run_dir))


def _corpus_root(args, cfg) -> Path:
    # a generated corpus lives in <output_dir>/corpus, as the pipeline lays it out
    return Path(cfg.output_dir)


def cmd_generate(args) -> int:
    cfg = _load(args)
    samples = pipeline.generate_corpus(cfg, args.out)
    print(json.dumps({"corpus": str(args.out), "n_samples": len(samples)}, sort_keys=True))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load(args)
    seed = _seed(args, cfg)
    splits = _splits(cfg, _corpus_root(args, cfg))
    model = pipeline.train_stage(cfg, splits["train"], seed)
    checkpoint.save_checkpoint(model, args.out, meta={"seed": seed, "stage": "base"})
    print(json.dumps({"checkpoint": str(args.out), "seed": seed, "parameters": model.num_parameters()}))
    return EXIT_OK


def cmd_prune(args) -> int:
    cfg = _load(args, {"mining.prune_method": args.method, "mining.prune_ratio": args.ratio})
    seed = _seed(args, cfg)
    model, _, _ = checkpoint.load_checkpoint(args.checkpoint)
    mask, sparsity = pipeline.prune_stage(model, cfg.mining.prune_method, cfg.mining.prune_ratio, seed)
    out = Path(args.out) if args.out else Path(str(args.checkpoint).rstrip("/") + "-pruned")
    checkpoint.save_checkpoint(model, out, mask=mask, meta={"seed": seed, "stage": "pruned"})
    summary = {"method": mask.method, "ratio": mask.ratio, "sparsity": sparsity, "zeros": mask.zeros(),
               "total": mask.total(), "checkpoint": str(out)}
    pipeline.write_json(summary, out / "sparsity.json")
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_mine(args) -> int:
    cfg = _load(args, {"mining.tau": args.tau, "mining.prune_ratio": args.ratio})
    seed = _seed(args, cfg)
    model, _, _ = checkpoint.load_checkpoint(args.checkpoint)
    splits = _splits(cfg, _corpus_root(args, cfg))
    result, _ = pipeline.mine_stage(cfg, model, splits["train"], seed)
    pipeline.write_mining(cfg, result, seed, args.out)
    print(json.dumps({"setting": cfg.setting, "n_records": len(result.records), "n_htl": len(result.htl_ids),
                      "excluded": len(result.excluded), "out": str(args.out)}, sort_keys=True))
    return EXIT_OK


def cmd_finetune(args) -> int:
    cfg = _load(args)
    seed = _seed(args, cfg)
    model, _, _ = checkpoint.load_checkpoint(args.checkpoint)
    splits = _splits(cfg, _corpus_root(args, cfg))
    train = splits["train"]
    pool = train
    if cfg.setting == "semi":
        labeled, unlabeled = pipeline.labeled_unlabeled(train)
        pool, _ = mining.mine_semi(model, labeled, unlabeled, replace(cfg.mining, seed=seed))
    ids = set(pipeline.read_htl_ids(args.htl))
    chosen = [s for s in pool if s.id in ids]
    if args.baseline:
        chosen = mining.baseline_sampler(args.baseline, pool, len(chosen), seed)
    tuned = pipeline.finetune_stage(cfg, model, chosen, pool, seed)
    arm = f"baseline-{args.baseline}" if args.baseline else "htl"
    checkpoint.save_checkpoint(tuned, args.out, meta={"seed": seed, "stage": arm, "n_finetune": len(chosen)})
    print(json.dumps({"checkpoint": str(args.out), "arm": arm, "n_finetune": len(chosen)}))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _load(args)
    model, mask, _ = checkpoint.load_checkpoint(args.checkpoint)
    splits = _splits(cfg, _corpus_root(args, cfg))
    if mask is not None:
        pruning.apply_mask(model, mask)
    m = pipeline.evaluate_stage(cfg, model, splits[args.split])
    if args.out:
        pipeline.write_metrics(m, args.out, Path(args.checkpoint).name, _seed(args, cfg), args.split)
    print(json.dumps(reporting.seg_metrics_dict(m), sort_keys=True))
    return EXIT_OK


def cmd_report(args) -> int:
    written = pipeline.report_stage(args.run_dir)
    print(json.dumps({k: str(v) for k, v in written.items()}, sort_keys=True))
    return EXIT_OK


def cmd_pipeline(args) -> int:
    cfg = _load(args)
    run_dir = _run_dir_for(cfg, args.out)
    written = pipeline.run_pipeline(cfg, run_dir)
    print(json.dumps({k: str(v) for k, v in written.items()}, sort_keys=True))
    return EXIT_OK


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "prune": cmd_prune, "mine": cmd_mine,
            "finetune": cmd_finetune, "evaluate": cmd_evaluate, "report": cmd_report, "pipeline": cmd_pipeline}


def classify(exc: BaseException) -> tuple[int, str]:
    if isinstance(exc, (ConfigError, UsageError)):
        return EXIT_CONFIG, "config"
    if isinstance(exc, (OSError, CheckpointError, data.ParseError)):
        return EXIT_IO, "io"
    return EXIT_RUNTIME, "runtime"


def error_record(exc: BaseException, command: str | None) -> dict:
    code, category = classify(exc)
    rec = {"error": {"category": category, "exit_code": code, "type": type(exc).__name__, "message": str(exc),
                     "command": command}}
    if isinstance(exc, ConfigValidationError):
        rec["error"]["errors"] = exc.errors
    if hasattr(exc, "epoch"):
        rec["error"]["epoch"] = exc.epoch
    return rec


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, UsageError, OSError, CheckpointError, data.ParseError, NumericError,
            ValueError, RuntimeError, KeyError) as exc:
        rec = error_record(exc, args.command)
        out = getattr(args, "out", None) or getattr(args, "run_dir", None)
        if out and Path(out).suffix == "" and Path(out).is_dir():
            try:
                pipeline.write_json(rec, Path(out) / "error.json")
            except OSError:
                pass
        print(json.dumps(rec, sort_keys=True), file=sys.stderr)
        return rec["error"]["exit_code"]


if __name__ == "__main__":
    sys.exit(main())
