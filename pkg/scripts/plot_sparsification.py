#!/usr/bin/env python3
"""Plot sparsification and oracle curves from an eval report directory."""
import argparse
import csv
import sys
from pathlib import Path


def read_curve(path):
    with open(path) as f:
        rows = list(csv.reader(f))[1:]
    return [float(r[0]) for r in rows], [float(r[1]) for r in rows]


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("report_dir")
    ap.add_argument("--out", default=None, help="output image (default: show)")
    args = ap.parse_args()

    import matplotlib
    if args.out:
        matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    root = Path(args.report_dir)
    fr, curve = read_curve(root / "sparsification.csv")
    _, oracle = read_curve(root / "oracle.csv")

    fig, ax = plt.subplots(figsize=(5, 4))
    ax.plot(fr, curve, label="by uncertainty")
    ax.plot(fr, oracle, label="oracle (by true error)")
    ax.fill_between(fr, oracle, curve, alpha=0.2)
    ax.set_xlabel("fraction of pixels removed")
    ax.set_ylabel("normalized RMSE of retained pixels")
    ax.legend()
    fig.tight_layout()
    if args.out:
        fig.savefig(args.out, dpi=150)
        print(f"wrote {args.out}")
    else:  # pragma: no cover - interactive use
        plt.show()
    return 0


if __name__ == "__main__":
    sys.exit(main())
