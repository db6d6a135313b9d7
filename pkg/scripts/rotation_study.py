"""Accuracy under random rotations and overlap of selected points for a trained checkpoint.

    python scripts/rotation_study.py runs/desk/model.ptfm
"""

import argparse

import numpy as np

from point_transformer.data import random_rotation_matrix, rotate, synthetic_dataset
from point_transformer.model import forward, load_checkpoint
from point_transformer.training import evaluate


def selection_overlap(params, cfg, sample, rot, radius):
    """Share of selections made on the rotated cloud that land within ``radius`` of a plain selection."""
    plain = forward(sample.cloud[None], params, cfg).local
    turned = forward(rotate(sample, rot).cloud[None], params, cfg).local
    shares = []
    for a, b in zip(plain, turned):
        back = b.source_points[0][:, :3] @ rot
        d = np.linalg.norm(back[:, None] - a.source_points[0][None, :, :3], axis=-1).min(axis=1)
        shares.append(float((d <= radius).mean()))
    return shares


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("checkpoint")
    ap.add_argument("--seed", type=int, default=0, help="dataset seed the checkpoint was trained with")
    ap.add_argument("--radius", type=float, default=0.1)
    ap.add_argument("--samples", type=int, default=40)
    args = ap.parse_args()

    cfg, params, _ = load_checkpoint(args.checkpoint)
    _, te = synthetic_dataset(800, 200, cfg.n, seed=args.seed)
    plain = evaluate(params, cfg, te)
    turned = evaluate(params, cfg, te, rotate_rng=np.random.default_rng(0))
    print(f"accuracy plain {plain.accuracy:.4f} rotated {turned.accuracy:.4f}")
    for c in sorted(plain.per_class):
        print(f"  class {c}: {plain.per_class[c]:.3f} -> {turned.per_class[c]:.3f}")

    rot = random_rotation_matrix(np.random.default_rng(1))
    shares = [selection_overlap(params, cfg, s, rot, args.radius) for s in te[: args.samples]]
    per_net = np.mean(shares, axis=0)
    print("selection overlap per SortNet: " + " ".join(f"{v:.3f}" for v in per_net))

    # chance level: the same number of points drawn uniformly from the cloud
    rng = np.random.default_rng(2)
    chance = []
    for s in te[: args.samples]:
        pts = s.cloud[:, :3]
        a, b = (pts[rng.choice(len(pts), cfg.k, replace=False)] for _ in range(2))
        d = np.linalg.norm(a[:, None] - b[None], axis=-1).min(axis=1)
        chance.append(float((d <= args.radius).mean()))
    print(f"chance overlap {np.mean(chance):.3f}")


if __name__ == "__main__":
    main()
