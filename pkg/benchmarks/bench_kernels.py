"""Time the numba kernels against their numpy twins.

    python benchmarks/bench_kernels.py [--repeat 5]

Both variants are called directly, so the ``INCDET_NUMBA`` flag does not
matter here. The first numba call (compilation) is excluded.
"""

import argparse
import timeit

import numpy as np

from incdet import kernels


def random_boxes(rng, n, size=64.0):
    xy = rng.uniform(0, size * 0.8, (n, 2))
    wh = rng.uniform(4, size * 0.3, (n, 2))
    return np.concatenate([xy, xy + wh], axis=1)


def cases(rng):
    a, b = random_boxes(rng, 300), random_boxes(rng, 300)
    ordered = random_boxes(rng, 1000)
    lo = rng.uniform(0, 12, 256)
    hi = lo + rng.uniform(0.5, 4, 256)
    ious = rng.uniform(0, 1, (200, 50))
    return {
        "pairwise_iou 300x300": ("_pairwise_iou", (a, b)),
        "nms_ordered 1000": ("_nms_ordered", (ordered, 0.5)),
        "footprint_mask 50 boxes": ("_footprint_mask", (a[:50], 16, 16, 4.0)),
        "bin_overlaps 256 rois": ("_bin_overlaps", (lo, hi, 4, 16)),
        "greedy_match 200x50": ("_greedy_match", (ious, 0.5)),
        "shape_mask 64x64": ("_shape_mask", (2, 30.0, 30.0, 12.0, 64, 64)),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    rng = np.random.default_rng(args.seed)
    print(f"{'kernel':<26} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8}")
    for name, (stem, call_args) in cases(rng).items():
        fn_np, fn_nb = getattr(kernels, stem + "_np"), getattr(kernels, stem + "_nb")
        fn_nb(*call_args)  # compile
        number = 20
        t_np = min(timeit.repeat(lambda: fn_np(*call_args), number=number, repeat=args.repeat)) / number
        t_nb = min(timeit.repeat(lambda: fn_nb(*call_args), number=number, repeat=args.repeat)) / number
        print(f"{name:<26} {t_np * 1e3:>10.3f} {t_nb * 1e3:>10.3f} {t_np / t_nb:>7.1f}x")


if __name__ == "__main__":
    main()
