"""Stage functions behind the CLI: corpus, train, prune, mine, fine-tune, evaluate, report.

Each stage reads and writes files under a run directory so that running the
stages one by one and running ``run_pipeline`` produce identical bytes.

Run directory layout::

    corpus/                      generated corpus (when the config generates one)
    config.json                  resolved run config
    seed_<s>/base/               base checkpoint
    seed_<s>/pruned/             base weights plus the probe mask
    seed_<s>/mining/             htl.csv, htl.json, drops.csv, drop_sweep.csv
    seed_<s>/finetuned/<arm>/    fine-tuned checkpoints (htl and each baseline)
    seed_<s>/eval/<arm>.json     held-out metrics per arm (base included)
    seed_<s>/ablation.csv/json
    reports/                     drop_summary, demographic_report, comparison_table, ablation
"""
from __future__ import annotations

import json
import logging
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import checkpoint, config as config_mod, data, metrics, mining, pruning, reporting, saliency
from .config import RunConfig
from .data import Sample
from .metrics import SegMetrics
from .training import TrainConfig
from .unet import Model, UsageError, build_classifier, build_unet

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")


def write_json(obj, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n")


def corpus_dir(cfg: RunConfig, run_dir) -> Path:
    return Path(cfg.dataset.path) if cfg.dataset.path is not None else Path(run_dir) / "corpus"


def generate_corpus(cfg: RunConfig, out) -> list[Sample]:
    if cfg.dataset.generate is None:
        raise UsageError("config has no [dataset.generate] section")
    samples = data.generate(cfg.dataset.generate)
    data.save_directory(samples, out)
    write_json(data.spec_to_dict(cfg.dataset.generate), Path(out) / "genspec.json")
    return samples


def load_corpus(cfg: RunConfig, run_dir) -> list[Sample]:
    """Read the corpus from disk, generating it first if needed.

    Training always sees the on-disk (16-bit quantized) images, so a
    generated corpus and a reloaded one give the same run.
    """
    root = corpus_dir(cfg, run_dir)
    if cfg.dataset.path is None and not (root / "metadata.jsonl").exists():
        generate_corpus(cfg, root)
    samples = data.load_directory(root)
    if not samples:
        raise UsageError(f"corpus at {root} is empty")
    return samples


def split_corpus(cfg: RunConfig, samples: list[Sample]) -> dict[str, list[Sample]]:
    parts = data.split(samples, cfg.dataset.split, seed=cfg.dataset.split_seed)
    return dict(zip(SPLITS, parts))


def labeled_unlabeled(train: list[Sample]) -> tuple[list[Sample], list[Sample]]:
    """Semi-supervised split of the training part: even positions keep masks."""
    return train[0::2], [replace(s, mask=None) for s in train[1::2]]


def _seed_dir(run_dir, seed: int) -> Path:
    return Path(run_dir) / f"seed_{seed}"


def _model_kind(cfg: RunConfig) -> str:
    return "classification" if cfg.setting == "weak" else "segmentation"


def train_stage(cfg: RunConfig, train: list[Sample], seed: int) -> Model:
    build = build_classifier if _model_kind(cfg) == "classification" else build_unet
    model = build(cfg.arch, seed=seed)
    pool = labeled_unlabeled(train)[0] if cfg.setting == "semi" else train
    mining.train_base(model, pool, cfg.training, seed=seed)
    return model


def prune_stage(model: Model, method: str, ratio: float, seed: int) -> tuple[pruning.PruneMask, float]:
    mask = pruning.make_mask(model, method, ratio, seed)
    return mask, mask.zeros() / mask.total() if mask.total() else 0.0


def mine_stage(cfg: RunConfig, model: Model, train: list[Sample], seed: int):
    """Returns (result, samples to fine-tune from). For semi the samples carry pseudo-masks."""
    mcfg = replace(cfg.mining, seed=seed)
    if cfg.setting == "supervised":
        return mining.mine_supervised(model, train, mcfg), train
    if cfg.setting == "semi":
        labeled, unlabeled = labeled_unlabeled(train)
        pseudo, result = mining.mine_semi(model, labeled, unlabeled, mcfg)
        return result, pseudo
    return mining.mine_weak(model, train, mcfg), train


def write_mining(cfg: RunConfig, result: mining.MiningResult, seed: int, out) -> None:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    mining.write_htl_csv(result.records, out / "htl.csv")
    manifest = {
        "setting": cfg.setting, "seed": seed, "mining_config": mining.config_dict(replace(cfg.mining, seed=seed)),
        "n_records": len(result.records), "htl_ids": result.htl_ids, "excluded_ids": result.excluded,
        "mask_sparsity": result.mask.zeros() / max(result.mask.total(), 1),
    }
    write_json(manifest, out / "htl.json")
    if result.drops:
        metrics.write_drop_csv(result.drops, out / "drops.csv")


def read_htl_ids(path) -> list[str]:
    return [r.sample_id for r in mining.read_htl_csv(path) if r.is_htl]


def finetune_stage(cfg: RunConfig, model: Model, chosen: list[Sample], pool: list[Sample], seed: int) -> Model:
    mcfg = replace(cfg.mining, seed=seed)
    return mining.finetune_on_htl(model, chosen, mcfg, cfg.setting, pool=pool)


def _box_mask(box, shape) -> np.ndarray:
    m = np.zeros(shape, dtype=np.uint8)
    if box is not None:
        m[box.y_min:box.y_max + 1, box.x_min:box.x_max + 1] = 1
    return m


def evaluate_stage(cfg: RunConfig, model: Model, samples: list[Sample]) -> SegMetrics:
    """Held-out localization metrics.

    Segmentation models are scored on their argmax masks. A classifier is
    scored on the filled GradCAM++ box against the filled box of the
    ground-truth mask.
    """
    if model.kind == "segmentation":
        return metrics.evaluate(model, samples)
    images = np.stack([s.image for s in samples])
    classes = [s.class_label for s in samples]
    boxes = saliency.heatmap_boxes(model, images, classes, cfg.mining.cam_threshold)
    shape = images.shape[2:]
    preds = [_box_mask(b, shape) for b in boxes]
    targets = [_box_mask(saliency.bounding_box(s.mask), shape) for s in samples]
    return metrics.mean_metrics(preds, targets)


def write_metrics(m: SegMetrics, path, arm: str, seed: int, split: str) -> None:
    write_json({"schema_version": reporting.SCHEMA_VERSION, "arm": arm, "seed": seed, "split": split,
                "metrics": reporting.seg_metrics_dict(m)}, path)


def arms(cfg: RunConfig) -> list[str]:
    return ["htl"] + [f"baseline-{b}" for b in cfg.baselines]


def run_seed(cfg: RunConfig, run_dir, seed: int, splits: dict[str, list[Sample]]) -> None:
    """All stages for one seed, strictly in order."""
    sd = _seed_dir(run_dir, seed)
    train, test = splits["train"], splits["test"]
    log.info("seed %d: training base model on %d samples", seed, len(train))
    base = train_stage(cfg, train, seed)
    checkpoint.save_checkpoint(base, sd / "base", meta={"seed": seed, "stage": "base"})

    mask, _ = prune_stage(base, cfg.mining.prune_method, cfg.mining.prune_ratio, seed)
    checkpoint.save_checkpoint(base, sd / "pruned", mask=mask, meta={"seed": seed, "stage": "pruned"})

    result, ft_pool = mine_stage(cfg, base, train, seed)
    write_mining(cfg, result, seed, sd / "mining")
    htl = set(result.htl_ids)
    chosen = [s for s in ft_pool if s.id in htl]
    log.info("seed %d: %d HTL samples of %d", seed, len(chosen), len(result.records))

    if base.kind == "segmentation":
        sweep = reporting.drop_sweep(base, train if cfg.setting != "semi" else labeled_unlabeled(train)[0],
                                     cfg.report.drop_ratios, cfg.mining.prune_method, seed)
        reporting.write_drop_summary(reporting.drop_summary(sweep), sd / "mining" / "drop_sweep")
        abl = reporting.ablation_report(base, test, (cfg.report.ablation_ratio,), cfg.report.ablation_methods, seed)
        reporting.write_ablation(abl, sd / "ablation")

    write_metrics(evaluate_stage(cfg, base, test), sd / "eval" / "base.json", "base", seed, "test")
    for arm in arms(cfg):
        if arm == "htl":
            picked = chosen
        else:
            picked = mining.baseline_sampler(arm[len("baseline-"):], ft_pool, len(chosen), seed)
        tuned = finetune_stage(cfg, base, picked, ft_pool, seed)
        checkpoint.save_checkpoint(tuned, sd / "finetuned" / arm, meta={"seed": seed, "stage": arm,
                                                                       "n_finetune": len(picked)})
        write_metrics(evaluate_stage(cfg, tuned, test), sd / "eval" / f"{arm}.json", arm, seed, "test")


def report_stage(run_dir) -> dict[str, Path]:
    """Aggregate every ``seed_*`` directory into the report tables."""
    run_dir = Path(run_dir)
    out = run_dir / "reports"
    out.mkdir(parents=True, exist_ok=True)
    seed_dirs = sorted((p for p in run_dir.glob("seed_*") if p.is_dir()), key=lambda p: int(p.name[5:]))
    if not seed_dirs:
        raise FileNotFoundError(f"no seed_* directories under {run_dir}")
    meta = {}
    corpus = run_dir / "corpus" / "metadata.jsonl"
    cfg_doc = json.loads((run_dir / "config.json").read_text()) if (run_dir / "config.json").exists() else {}
    ds_path = cfg_doc.get("dataset", {}).get("path")
    if ds_path:
        corpus = Path(ds_path) / "metadata.jsonl"
    if corpus.exists():
        for line in corpus.read_text().splitlines():
            if line.strip():
                rec = json.loads(line)
                meta[str(rec["id"])] = rec

    runs, records, drops, sweeps, ablations = [], [], [], {}, []
    for sd in seed_dirs:
        seed = int(sd.name[5:])
        for f in sorted((sd / "eval").glob("*.json")):
            doc = json.loads(f.read_text())
            runs.append(reporting.RunResult(doc["arm"], seed, SegMetrics(**doc["metrics"])))
        # ids are prefixed with the seed so measurements from different seeds stay distinct
        if (sd / "mining" / "htl.csv").exists():
            records += [replace(r, sample_id=f"{seed}:{r.sample_id}")
                        for r in mining.read_htl_csv(sd / "mining" / "htl.csv")]
        if (sd / "mining" / "drops.csv").exists():
            drops += [replace(d, sample_id=f"{seed}:{d.sample_id}")
                      for d in metrics.read_drop_csv(sd / "mining" / "drops.csv")]
        if (sd / "mining" / "drop_sweep.csv").exists():
            _, rows = reporting.read_table_csv(sd / "mining" / "drop_sweep.csv")
            for r in rows:
                sweeps.setdefault(float(r["ratio"]), []).append(r)
        if (sd / "ablation.csv").exists():
            _, rows = reporting.read_table_csv(sd / "ablation.csv")
            ablations.append(rows)

    order = {"base": 0, "htl": 1}
    runs.sort(key=lambda r: (order.get(r.method, 2), r.method, r.seed))
    written = {}
    reporting.write_comparison(reporting.comparison_table(runs), out / "comparison_table")
    written["comparison_table"] = out / "comparison_table.csv"
    if records:
        seeded_meta = {r.sample_id: meta.get(r.sample_id.split(":", 1)[1], {}) for r in records}
        disp = reporting.demographic_report(records, seeded_meta, drops)
        reporting.write_disparity(disp, out / "demographic_report")
        written["demographic_report"] = out / "demographic_report.csv"
    if sweeps:
        rows = [reporting.DropSummaryRow(ratio, sum(int(r["n"]) for r in rs),
                                         float(np.mean([float(r["mean_drop_fg"]) for r in rs])),
                                         float(np.mean([float(r["mean_drop_bg"]) for r in rs])))
                for ratio, rs in sorted(sweeps.items())]
        reporting.write_drop_summary(rows, out / "drop_summary")
        written["drop_summary"] = out / "drop_summary.csv"
    if ablations:
        keys = [(r["prune_method"], float(r["ratio"])) for r in ablations[0]]
        rows = []
        for i, (method, ratio) in enumerate(keys):
            fg = float(np.mean([float(a[i]["fg_iou"]) for a in ablations]))
            delta = float(np.mean([float(a[i]["delta_vs_full"]) for a in ablations]))
            rows.append(reporting.AblationRow(method, ratio, fg, delta))
        reporting.write_ablation(reporting.AblationReport(rows), out / "ablation")
        written["ablation"] = out / "ablation.csv"
    return written


def run_pipeline(cfg: RunConfig, run_dir) -> dict[str, Path]:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    write_json(config_mod.to_dict(cfg), run_dir / "config.json")
    splits = split_corpus(cfg, load_corpus(cfg, run_dir))
    for seed in cfg.seeds:
        run_seed(cfg, run_dir, seed, splits)
    return report_stage(run_dir)


def finetune_config_for(cfg: RunConfig) -> TrainConfig:
    return cfg.mining.finetune_config()
