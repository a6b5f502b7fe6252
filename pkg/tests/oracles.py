"""Independent brute-force reference implementations used by the tests."""
import itertools
import math
from collections import deque

import numpy as np
from scipy import special

NEIGHBOURS_26 = [d for d in itertools.product((-1, 0, 1), repeat=3) if d != (0, 0, 0)]
NEIGHBOURS_6 = [d for d in NEIGHBOURS_26 if sum(map(abs, d)) == 1]


def flood_fill_components(mask, neighbours=NEIGHBOURS_26):
    """List of components (lists of voxel tuples) in raster order of their seed voxel.

    Plain breadth-first search over a zero-padded flat copy of the mask, so
    neighbours never need bounds checks.
    """
    mask = np.asarray(mask) > 0
    shape = mask.shape
    pshape = tuple(s + 2 for s in shape)
    flat = np.pad(mask, 1).ravel().tolist()
    strides = (pshape[1] * pshape[2], pshape[2], 1)
    offsets = [sum(d * s for d, s in zip(dv, strides)) for dv in neighbours]
    seen = [False] * len(flat)
    comps = []
    for seed in zip(*np.nonzero(mask)):  # np.nonzero is raster ordered
        i0 = sum((c + 1) * s for c, s in zip(seed, strides))
        if seen[i0]:
            continue
        seen[i0] = True
        comp, queue = [], deque([i0])
        while queue:
            i = queue.popleft()
            comp.append(i)
            for o in offsets:
                j = i + o
                if flat[j] and not seen[j]:
                    seen[j] = True
                    queue.append(j)
        comps.append([(i // strides[0] - 1, i % strides[0] // strides[1] - 1, i % strides[1] - 1) for i in comp])
    return comps


def largest_component_oracle(mask):
    comps = flood_fill_components(mask)
    best = max(comps, key=len)  # max keeps the first maximum
    out = np.zeros(np.asarray(mask).shape, dtype=np.uint8)
    for v in best:
        out[v] = 1
    return out


def pooled_t_test_oracle(a, b):
    """Textbook Student t-test with pooled variance and a regularised-incomplete-beta p-value."""
    a = [float(v) for v in a]
    b = [float(v) for v in b]
    na, nb = len(a), len(b)
    ma, mb = sum(a) / na, sum(b) / nb
    ssa = sum((v - ma) ** 2 for v in a)
    ssb = sum((v - mb) ** 2 for v in b)
    dof = na + nb - 2
    sp2 = (ssa + ssb) / dof
    t = (ma - mb) / math.sqrt(sp2 * (1.0 / na + 1.0 / nb))
    p = special.betainc(dof / 2.0, 0.5, dof / (dof + t * t))
    return t, p


def central_difference_grad(f, x, h=1e-6):
    """Gradient of scalar ``f`` at float64 array ``x`` by central differences."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + h
        fp = f(x)
        x[i] = orig - h
        fm = f(x)
        x[i] = orig
        g[i] = (fp - fm) / (2 * h)
    return g
