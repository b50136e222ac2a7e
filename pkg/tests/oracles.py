"""Independent brute-force references used by the tests."""

import math

import numpy as np


def boundary_bruteforce(mask):
    """Voxels of ``mask`` with a face-neighbor outside it or outside the volume."""
    mask = np.asarray(mask, dtype=bool)
    out = np.zeros_like(mask)
    for idx in zip(*np.nonzero(mask)):
        for axis in range(mask.ndim):
            for step in (-1, 1):
                nb = list(idx)
                nb[axis] += step
                if not 0 <= nb[axis] < mask.shape[axis] or not mask[tuple(nb)]:
                    out[idx] = True
    return out


def hd95_bruteforce(a, b, spacing):
    """Exhaustive all-pairs nearest-surface distances, 95th percentile each way."""
    spacing = [float(s) for s in spacing]
    pa = [[i * s for i, s in zip(idx, spacing)] for idx in zip(*np.nonzero(boundary_bruteforce(a)))]
    pb = [[i * s for i, s in zip(idx, spacing)] for idx in zip(*np.nonzero(boundary_bruteforce(b)))]
    pad = [0.0] * (3 - len(spacing))
    pa = [pad + p for p in pa]
    pb = [pad + p for p in pb]

    def directed(src, dst):
        out = []
        for u in src:
            best = math.inf
            for v in dst:
                dz, dy, dx = u[0] - v[0], u[1] - v[1], u[2] - v[2]
                d = dz * dz + dy * dy
                d = d + dx * dx
                best = min(best, d)
            out.append(math.sqrt(best))
        return out

    def pct95(vals):
        vals = sorted(vals)
        h = (len(vals) - 1) * 0.95
        lo = math.floor(h)
        hi = min(lo + 1, len(vals) - 1)
        return vals[lo] + (vals[hi] - vals[lo]) * (h - lo)

    return max(pct95(directed(pa, pb)), pct95(directed(pb, pa)))
