"""Train one model per point-selection rule (learned score, FPS, random) and print test accuracy.

    python scripts/selection_ablation.py --epochs 8 --k 8 --m 1 --sortnet-only
"""

import argparse
import logging
import time

from point_transformer.cli import run_ablation
from point_transformer.data import synthetic_dataset
from point_transformer.model import ModelConfig
from point_transformer.training import TrainConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--epochs", type=int, default=8)
    ap.add_argument("--lr", type=float, default=5e-4)
    ap.add_argument("--k", type=int, default=8)
    ap.add_argument("--m", type=int, default=1)
    ap.add_argument("--sortnet-only", action="store_true")
    ap.add_argument("--noise", type=float, default=0.01)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--variants", default="learned,fps,random")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    cfg = ModelConfig.desk(k=args.k, m=args.m, sortnet_only=args.sortnet_only)
    train_cfg = TrainConfig(batch_size=16, epochs=args.epochs, lr=args.lr, dtype="float32", seed=args.seed)
    tr, te = synthetic_dataset(800, 200, cfg.n, seed=args.seed, noise=args.noise)
    t0 = time.perf_counter()
    acc = run_ablation(cfg, train_cfg, tr, te, tuple(args.variants.split(",")))
    for variant, a in acc.items():
        print(f"{variant}\t{a:.4f}")
    print(f"seconds\t{time.perf_counter() - t0:.0f}")


if __name__ == "__main__":
    main()
