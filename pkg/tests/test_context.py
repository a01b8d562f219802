import numpy as np
from hypothesis import given
from hypothesis import strategies as st

from teso.core.morton import morton_decode
from teso.core.types import LeafSet, OctreeCube, Surfel, SurfelOctree
from teso.geocodec.context import cube_surfel_intersects, intersects, rasterize_context
from teso.texture import tangent_axes
from treegen import random_tree


def disk_hits_cube(center, normal, r, anchor, width, n=121):
    """Dense sampling of the surfel disk against the closed cube."""
    u, v = (a[0] for a in tangent_axes(np.asarray(normal, dtype=np.float64)))
    g = np.linspace(-r, r, n)
    a, b = np.meshgrid(g, g)
    keep = (a * a + b * b <= r * r).ravel()
    p = center + a.ravel()[keep, None] * u + b.ravel()[keep, None] * v
    tol = 1e-9
    return bool(np.any(np.all((p >= anchor - tol) & (p <= anchor + width + tol), axis=1)))


def test_intersect_examples():
    cube = OctreeCube(7, (0, 0, 0), 10)  # [0, 8)^3
    z = np.array([0, 0, 1.0])
    assert cube_surfel_intersects(cube, Surfel(np.array([4.0, 4, 4]), z, 20.0), (0, 0, 0))
    assert not cube_surfel_intersects(cube, Surfel(np.array([4.0, 4, -3]), z, 20.0), (0, 0, 0))
    # plane z=4 crosses the cube but the center is 2r away from it laterally
    assert not cube_surfel_intersects(cube, Surfel(np.array([4.0 + 8 + 6, 4, 4]), z, 3.0), (0, 0, 0))
    assert not disk_hits_cube(np.array([18.0, 4, 4]), z, 3.0, np.zeros(3), 8)


@given(st.integers(0, 2**32 - 1))
def test_intersect_contains_true_overlaps(seed):
    rng = np.random.default_rng(seed)
    anchor = rng.integers(0, 4, 3) * 8.0
    n = rng.normal(size=3)
    n /= np.linalg.norm(n)
    c = rng.uniform(-6, 38, 3)
    r = rng.uniform(0.5, 12)
    hit = bool(intersects(anchor, 8.0, c, n, r)[0])
    if disk_hits_cube(c, n, r, anchor, 8.0):
        assert hit  # never misses a real overlap
    # and the analytic parts: plane crosses and center within r
    corners = anchor + 8.0 * np.array([[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)])
    s = (corners - c) @ n
    d = np.linalg.norm(np.maximum(np.maximum(anchor - c, 0), c - anchor - 8))
    assert hit == (s.min() <= 0 <= s.max() and d <= r)


def one_leaf_tree(level, code, offset, normal, radius, depth=10, levels=(6, 7, 8)):
    sets = {l: LeafSet.empty() for l in levels}
    sets[level] = LeafSet(np.array([code]), np.array([offset]), np.array([normal]), np.array([radius]))
    # a finest-level leaf elsewhere so every level is populated
    return SurfelOctree.from_leaves(depth, levels, {l: 4 for l in levels}, sets)


def test_four_children():
    # plane x = b/4 inside a level-7 leaf crosses only the four x=0 children
    t = one_leaf_tree(7, 0, [2.0, 4, 4], [1.0, 0, 0], 6.0)
    ctx = rasterize_context(t, 8)
    assert len(ctx.virtual) == 4
    assert np.all(morton_decode(ctx.virtual.codes, 8)[:, 0] == 0)
    assert ctx.unknown.size == 0


def test_no_leaves_above():
    t = one_leaf_tree(8, 5, [1.0, 1, 1], [0, 0, 1.0], 1.0)
    assert len(rasterize_context(t, 7).virtual) == 0
    assert len(rasterize_context(t, 8).virtual) == 0
    assert rasterize_context(t, 8).unknown.size == 8


def brute_virtual(tree, level):
    out = []
    for l in tree.leaf_levels:
        if l >= level:
            continue
        s = tree.leaf_set(l)
        wl = tree.width(l)
        w = tree.width(level)
        k = 3 * (level - l)
        for code, off, nrm, r in zip(s.codes, s.offsets, s.normals, s.radii):
            P = morton_decode(int(code), l)
            center = np.asarray(P, float) * wl + off
            desc = (int(code) << k) + np.arange(1 << k)
            anchors = morton_decode(desc, level).astype(float) * w
            hit = intersects(anchors, np.full(desc.size, w), np.tile(center, (desc.size, 1)),
                             np.tile(nrm, (desc.size, 1)), np.full(desc.size, r))
            out.extend(desc[hit].tolist())
    return sorted(out)


def test_grandchildren():
    t = one_leaf_tree(6, 3, [8.0, 8, 8], [0.0, 0.6, 0.8], 9.0)
    ctx = rasterize_context(t, 8)
    assert len(ctx.virtual) > 0
    assert ctx.virtual.codes.tolist() == brute_virtual(t, 8)
    assert np.all(ctx.virtual.codes >> 6 == 3)


@given(st.integers(0, 2**32 - 1))
def test_rasterize_matches_brute_force(seed):
    t = random_tree(np.random.default_rng(seed), n=60)
    for level in (7, 8):
        ctx = rasterize_context(t, level)
        assert ctx.virtual.codes.tolist() == brute_virtual(t, level)
        parents = t.nodes[level - 1]
        assert np.array_equal(ctx.split, parents.codes[~parents.leaf])
        # disjoint from to-be-split nodes' children? virtual nodes come only from leaf ancestors
        assert not np.isin(ctx.virtual.codes >> 3, ctx.split).any()
