"""Foreground versus background IoU degradation across prune ratios for one trained seed.

    python scripts/drop_sweep.py --seed 10 --ratios 0.1 0.25 0.5 0.75 0.9
"""
import argparse
import tempfile

from htlprune import config, pipeline, reporting


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default="desk")
    ap.add_argument("--seed", type=int, default=10)
    ap.add_argument("--method", default="unstructured-magnitude")
    ap.add_argument("--ratios", type=float, nargs="+", default=[0.1, 0.25, 0.5, 0.75, 0.9])
    ap.add_argument("--split", default="test", choices=pipeline.SPLITS)
    args = ap.parse_args()

    cfg = config.load_config(args.config)
    with tempfile.TemporaryDirectory() as tmp:
        splits = pipeline.split_corpus(cfg, pipeline.load_corpus(cfg, tmp))
    model = pipeline.train_stage(cfg, splits["train"], args.seed)
    rows = reporting.drop_summary(reporting.drop_sweep(model, splits[args.split], args.ratios,
                                                       args.method, args.seed))
    print(f"{'ratio':>6} {'fg drop %':>10} {'bg drop %':>10}")
    for r in rows:
        print(f"{r.ratio:6.2f} {r.pct_drop_fg:10.2f} {r.pct_drop_bg:10.2f}")


if __name__ == "__main__":
    main()
