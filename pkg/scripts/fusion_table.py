"""Fusion-kind comparison table on the desk-scale setup (val/test IoU@0.5 per seed).

    python3 scripts/fusion_table.py --kinds RSD,TopLayer,SampleSpecific --seeds 0,1,2,3,4
"""
import argparse
import logging
from pathlib import Path

from desk_learnability import ensure_data

from layerfuse.persistence import RunConfig
from layerfuse.train import compare_csv, run_compare


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--kinds", default="RSD,TopLayer,SampleSpecific")
    ap.add_argument("--seeds", default="0,1,2,3,4")
    ap.add_argument("--epochs", type=int, default=20)
    ap.add_argument("--out-dir", default="runs/desk")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    paths = ensure_data(Path(args.out_dir) / "data")
    cfg = RunConfig()
    cfg.data.train, cfg.data.val, cfg.data.test = (str(paths[k]) for k in ("train", "val", "test"))
    cfg.train.epochs = args.epochs
    rows = run_compare(cfg, args.kinds.split(","), [int(s) for s in args.seeds.split(",")],
                       Path(args.out_dir) / "compare.csv")
    print(compare_csv(rows), end="")


if __name__ == "__main__":
    main()
