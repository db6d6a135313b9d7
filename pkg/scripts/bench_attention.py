"""Time one self-attention block against cloud size and fit the scaling exponent.

    python scripts/bench_attention.py --sizes 128,256,512,1024,2048
"""

import argparse

from point_transformer.cli import bench_self_attention


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", default="128,256,512,1024")
    ap.add_argument("--d-m", type=int, default=64)
    ap.add_argument("--heads", type=int, default=4)
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args()

    sizes = [int(s) for s in args.sizes.split(",")]
    times, exponent = bench_self_attention(sizes, args.d_m, args.heads, args.repeats)
    for n, t in zip(sizes, times):
        print(f"{n:6d}  {t * 1e3:9.2f} ms")
    print(f"fitted exponent {exponent:.2f}")


if __name__ == "__main__":
    main()
