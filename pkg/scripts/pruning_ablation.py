"""Post-prune foreground IoU of each pruning method over several ratios and seeds.

    python scripts/pruning_ablation.py --seeds 10 20 30 --ratios 0.3 0.5 0.7
"""
import argparse
import tempfile

import numpy as np

from htlprune import config, pipeline, pruning, reporting


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default="desk")
    ap.add_argument("--seeds", type=int, nargs="+", default=[10, 20, 30])
    ap.add_argument("--ratios", type=float, nargs="+", default=[0.3, 0.5, 0.7])
    args = ap.parse_args()

    cfg = config.load_config(args.config)
    with tempfile.TemporaryDirectory() as tmp:
        splits = pipeline.split_corpus(cfg, pipeline.load_corpus(cfg, tmp))
    table: dict[tuple[str, float], list[float]] = {}
    for seed in args.seeds:
        model = pipeline.train_stage(cfg, splits["train"], seed)
        rep = reporting.ablation_report(model, splits["test"], args.ratios, pruning.METHODS, seed)
        for row in rep.rows:
            table.setdefault((row.prune_method, row.ratio), []).append(row.fg_iou)
    print(f"{'method':<24} {'ratio':>5} {'fg IoU':>8} {'std':>7}")
    for (method, ratio), vals in table.items():
        print(f"{method:<24} {ratio:5.2f} {np.mean(vals):8.3f} {np.std(vals):7.3f}")


if __name__ == "__main__":
    main()
