"""Train the desk-scale classifier on the 4-class synthetic benchmark and log per-epoch test accuracy.

    python scripts/train_benchmark.py --epochs 12 --out runs/desk
"""

import argparse
import logging
import time

from point_transformer.data import synthetic_dataset
from point_transformer.model import ModelConfig
from point_transformer.training import TrainConfig, train_loop


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--epochs", type=int, default=12)
    ap.add_argument("--lr", type=float, default=5e-4)
    ap.add_argument("--batch-size", type=int, default=16)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--global-mode", default="msg", choices=("msg", "none"))
    ap.add_argument("--float64", action="store_true", help="train in 64-bit (slower)")
    ap.add_argument("--out", default="runs/desk")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    cfg = ModelConfig.desk(global_mode=args.global_mode)
    train_cfg = TrainConfig(
        batch_size=args.batch_size, epochs=args.epochs, lr=args.lr, seed=args.seed,
        dtype="float64" if args.float64 else "float32",
    )
    tr, te = synthetic_dataset(800, 200, cfg.n, seed=args.seed)
    t0 = time.perf_counter()
    res = train_loop(cfg, train_cfg, tr, te, args.out, extra={"data": {"seed": args.seed}})
    best = max(h[2] for h in res.history)
    print(f"final accuracy {res.history[-1][2]:.4f}, best {best:.4f}, {time.perf_counter() - t0:.0f}s")
    print(f"checkpoint {res.checkpoint}")


if __name__ == "__main__":
    main()
