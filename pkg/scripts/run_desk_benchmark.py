"""Run the full desk benchmark (every seed, every arm) and print the report tables.

    python scripts/run_desk_benchmark.py --out runs/desk [--config desk] [--set training.epochs=10]
"""
import argparse
import sys
from pathlib import Path

from htlprune import cli


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/desk")
    ap.add_argument("--config", default="desk")
    ap.add_argument("--set", action="append", default=[])
    args = ap.parse_args()
    argv = ["pipeline", "--config", args.config, "--out", args.out]
    for item in args.set:
        argv += ["--set", item]
    code = cli.main(argv)
    if code:
        return code
    for name in ("comparison_table", "drop_summary", "demographic_report", "ablation"):
        path = Path(args.out) / "reports" / f"{name}.csv"
        print(f"\n== {name}")
        print(path.read_text(), end="")
    return 0


if __name__ == "__main__":
    sys.exit(main())
