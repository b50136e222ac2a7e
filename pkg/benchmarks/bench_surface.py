"""Time the nearest-surface kernel: compiled extension vs numpy fallback.

    python3 benchmarks/bench_surface.py [--repeat 5]
"""

import argparse
import timeit

import numpy as np

from organseg import kernels
from organseg.metrics import hd95, surface_points


def ellipsoid(shape, center, radii):
    grid = np.indices(shape).astype(np.float64)
    r = sum(((g - c) / a) ** 2 for g, c, a in zip(grid, center, radii))
    return r <= 1.0


def cases():
    shape = (40, 64, 64)
    yield "small organ", ellipsoid(shape, (20, 32, 32), (3, 4, 4)), ellipsoid(shape, (20, 33, 31), (3, 4, 5))
    yield "medium organ", ellipsoid(shape, (20, 32, 32), (8, 12, 10)), ellipsoid(shape, (21, 30, 33), (8, 11, 11))
    yield "large organ", ellipsoid(shape, (20, 32, 32), (15, 26, 24)), ellipsoid(shape, (20, 31, 32), (14, 27, 25))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    spacing = (3.0, 1.5, 1.5)
    if not kernels.HAVE_COMPILED:
        print("compiled kernel not built; only the fallback is timed")
    print(f"{'case':<14} {'points':>13} {'numpy ms':>10} {'compiled ms':>12} {'speedup':>8}  agree")
    for name, a, b in cases():
        pa, pb = surface_points(a, spacing), surface_points(b, spacing)
        t_py = min(timeit.repeat(lambda: kernels.fallback_directed_min_sqdist(pa, pb),
                                 number=1, repeat=args.repeat)) * 1e3
        row = f"{name:<14} {len(pa):>6}x{len(pb):<6} {t_py:>10.2f}"
        if kernels.HAVE_COMPILED:
            t_c = min(timeit.repeat(lambda: kernels.compiled_directed_min_sqdist(pa, pb),
                                    number=1, repeat=args.repeat)) * 1e3
            agree = np.array_equal(kernels.fallback_directed_min_sqdist(pa, pb),
                                   kernels.compiled_directed_min_sqdist(pa, pb))
            row += f" {t_c:>12.2f} {t_py / t_c:>7.1f}x  {agree}"
        print(row)
    a, b = next(iter(cases()))[1:]
    print(f"hd95 small organ pair: {hd95(a, b, spacing):.4f} mm")


if __name__ == "__main__":
    main()
