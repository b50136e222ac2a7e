"""Pure-numpy nearest-surface kernel (same arithmetic as the compiled one)."""

import numpy as np

_CHUNK = 2048


def directed_min_sqdist(src, dst):
    """Squared distance from each ``src`` point to its nearest ``dst`` point."""
    src = np.ascontiguousarray(src, dtype=np.float64)
    dst = np.ascontiguousarray(dst, dtype=np.float64)
    out = np.empty(len(src), dtype=np.float64)
    if len(dst) == 0:
        out.fill(np.inf)
        return out
    for i in range(0, len(src), _CHUNK):
        a = src[i:i + _CHUNK]
        dz = a[:, None, 0] - dst[None, :, 0]
        dy = a[:, None, 1] - dst[None, :, 1]
        dx = a[:, None, 2] - dst[None, :, 2]
        d = dz * dz + dy * dy
        d += dx * dx
        out[i:i + _CHUNK] = d.min(axis=1)
    return out
