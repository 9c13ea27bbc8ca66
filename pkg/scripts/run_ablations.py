"""Desk-scale ablation sweeps over the objective and the backbone.

    python3 scripts/run_ablations.py decoder_mask scan_order ar_ratio [--out runs/ablate]

Grids: decoder_mask (AR / MAE / localMAE / MAP visibility), scan_order (SSM
scan x AR order, the pilot), ar_ratio (fraction of the AR sequence predicted),
mask_strategy, mask_ratio, pattern. Each grid writes <out>/<grid>.csv and
prints a small table. All cells share seeds and the finetune budget.
"""

from __future__ import annotations

import argparse
import csv
from pathlib import Path

from mapretrain.trainer import NAMED_GRIDS, load_images, run_ablation_grid

from trend_check import TREND


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("grids", nargs="+", choices=sorted(NAMED_GRIDS))
    ap.add_argument("--out", type=Path, default=Path("runs/ablate"))
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--no-finetune", action="store_true")
    args = ap.parse_args()

    base = TREND.replace(seed=args.seed)
    data = load_images(base)
    for name in args.grids:
        out = args.out / f"{name}.csv"
        run_ablation_grid(base, NAMED_GRIDS[name], out, args.out / f"{name}_cells",
                          finetune_cells=not args.no_finetune, data=data)
        print(f"\n{name}  ({out})")
        for row in csv.DictReader(open(out)):
            acc = f"{float(row['accuracy']):.3f}" if row["accuracy"] else "-"
            mse = f"{float(row['final_mse']):.3f}" if row["final_mse"] else "-"
            print(f"  {row['cell']:<40} {row['status']:<6} mse {mse}  acc {acc}")


if __name__ == "__main__":
    main()
