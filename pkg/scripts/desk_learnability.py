"""Train RSD on the desk-scale synthetic setup and print the learning curve.

    python3 scripts/desk_learnability.py [--kind RSD] [--seed 0] [--epochs 20] [--out-dir runs/desk]
"""
import argparse
import logging
import time
from pathlib import Path

from layerfuse.persistence import RunConfig
from layerfuse.synthgen import SceneSpec, generate_dataset
from layerfuse.train import run_train


def ensure_data(root: Path) -> dict[str, Path]:
    root.mkdir(parents=True, exist_ok=True)
    paths = {}
    for name, seed, count in (("train", 1, 2000), ("val", 2, 500), ("test", 3, 500)):
        paths[name] = root / f"{name}.jsonl"
        if not paths[name].exists():
            generate_dataset(SceneSpec(), count, seed, paths[name])
    return paths


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--kind", default="RSD")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--epochs", type=int, default=20)
    ap.add_argument("--stream", default="single")
    ap.add_argument("--out-dir", default="runs/desk")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    paths = ensure_data(Path(args.out_dir) / "data")
    cfg = RunConfig()
    cfg.data.train, cfg.data.val, cfg.data.test = (str(paths[k]) for k in ("train", "val", "test"))
    cfg.fusion.kind, cfg.seed, cfg.train.epochs = args.kind, args.seed, args.epochs
    cfg.encoder.stream = args.stream
    cfg.out_dir = str(Path(args.out_dir) / f"{args.kind}-seed{args.seed}")
    start = time.process_time()
    result = run_train(cfg)
    print(result.metrics_csv(), end="")
    print(f"cpu seconds: {time.process_time() - start:.1f}; outputs in {cfg.out_dir}")


if __name__ == "__main__":
    main()
