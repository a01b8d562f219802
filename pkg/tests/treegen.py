"""Random valid surfel trees for codec tests."""

import numpy as np

from teso.core.types import LeafSet, SurfelOctree
from teso.quant import quantize_tree


def random_tree(rng, n=200, levels=(6, 7, 8), depth=10, quantize=True, patches=False):
    """Leaves scattered over ``levels`` such that no leaf contains another."""
    lmax = levels[-1]
    fine = np.unique(rng.integers(0, 8 ** lmax, size=n))
    leaves = {}
    taken = np.zeros(0, np.int64)  # finest-level codes already covered
    for l in levels:
        shift = 3 * (lmax - l)
        cand = np.unique(fine >> shift)
        if l != lmax:
            cand = cand[rng.uniform(size=cand.size) < 0.4]
        covered = np.unique(taken >> shift)
        cand = np.setdiff1d(cand, covered)
        # coarse leaves must not contain already chosen finer ones: choose coarse first
        leaves[l] = cand
        taken = np.union1d(taken, (cand[:, None] << shift | np.arange(1 << shift)[None, :]).ravel()
                           if shift else cand)
    sets = {}
    for l, codes in leaves.items():
        b = float(1 << (depth - l))
        m = codes.size
        nrm = rng.normal(size=(m, 3))
        nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
        sets[l] = LeafSet(codes, rng.uniform(0, b, (m, 3)) * 0.999, nrm,
                          rng.uniform(0.05, 0.86 * b, m),
                          patches=rng.uniform(size=(m, 4, 4, 3)) if patches else None)
    sizes = {l: 4 for l in levels}
    tree = SurfelOctree.from_leaves(depth, levels, sizes, sets)
    return quantize_tree(tree) if quantize else tree
