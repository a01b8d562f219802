"""Rasterized coding context: ancestor surfels pushed down to the coding level.

Every leaf above the coding level ``l`` is expanded into the descendant
cubes at ``l`` that its surfel actually crosses ("virtual" nodes). The
occupancy and attribute coders count virtual nodes around each node to
pick a context.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..core.morton import FACE_OFFSETS, count_present, morton_decode, neighbor_codes
from ..core.types import OctreeCube, Surfel, SurfelOctree


def _box_distance(anchors, width, points):
    lo = anchors
    hi = anchors + width
    d = np.maximum(np.maximum(lo - points, 0.0), points - hi)
    return np.sqrt((d * d).sum(axis=-1))


_CORNERS = np.array([[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)], dtype=np.float64)


def intersects(anchors, width, centers, normals, radii) -> np.ndarray:
    """Vectorized cube/surfel test.

    True where the surfel plane separates or touches the cube corners and
    the surfel center lies within ``r`` of the (closed) cube.
    """
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 3)
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
    normals = np.asarray(normals, dtype=np.float64).reshape(-1, 3)
    corners = anchors[:, None, :] + np.asarray(width, dtype=np.float64).reshape(-1, 1, 1) * _CORNERS
    s = np.einsum("nkj,nj->nk", corners - centers[:, None, :], normals)
    plane = (s.min(axis=1) <= 0.0) & (s.max(axis=1) >= 0.0)
    near = _box_distance(anchors, np.asarray(width, dtype=np.float64).reshape(-1, 1), centers) <= np.asarray(radii).reshape(-1)
    return plane & near


def cube_surfel_intersects(cube: OctreeCube, surfel: Surfel, surfel_anchor) -> bool:
    """Whether ``surfel`` (anchored at ``surfel_anchor``, an ancestor's corner) crosses ``cube``."""
    P = np.asarray(surfel_anchor, dtype=np.float64) + np.asarray(surfel.offset, dtype=np.float64)
    return bool(intersects(cube.anchor, cube.width, P, surfel.normal, surfel.radius)[0])


@dataclass(frozen=True)
class VirtualNodes:
    """Virtual nodes at one level, Morton sorted.

    ``source`` indexes the originating leaf in the tree's flat leaf order;
    ``centers``/``normals``/``radii`` are the source surfel in world voxels.
    """

    level: int
    depth: int
    codes: np.ndarray
    source: np.ndarray
    centers: np.ndarray
    normals: np.ndarray
    radii: np.ndarray

    def __len__(self):
        return self.codes.shape[0]

    @property
    def anchors(self) -> np.ndarray:
        return morton_decode(self.codes, self.level).astype(np.float64) * float(1 << (self.depth - self.level))

    @property
    def offsets(self) -> np.ndarray:
        """Source surfel centers relative to each virtual cube's anchor."""
        return self.centers - self.anchors

    @classmethod
    def empty(cls, level, depth):
        z3 = np.zeros((0, 3))
        return cls(level, depth, np.zeros(0, np.int64), np.zeros(0, np.int64), z3, z3, np.zeros(0))


def expand(parent_codes, level: int, depth: int, source, centers, normals, radii) -> VirtualNodes:
    """Children at ``level`` of the given ``level - 1`` cubes crossed by their surfels."""
    parent_codes = np.asarray(parent_codes, dtype=np.int64)
    if parent_codes.size == 0:
        return VirtualNodes.empty(level, depth)
    child = (parent_codes[:, None] * 8 + np.arange(8)).reshape(-1)
    rep = np.repeat(np.arange(parent_codes.size), 8)
    w = float(1 << (depth - level))
    anchors = morton_decode(child, level).astype(np.float64) * w
    keep = intersects(anchors, np.full(child.size, w), centers[rep], normals[rep], radii[rep])
    sel = rep[keep]
    codes = child[keep]
    order = np.argsort(codes, kind="stable")
    sel = sel[order]
    return VirtualNodes(level, depth, codes[order], np.asarray(source)[sel], centers[sel], normals[sel], radii[sel])


def _merge(a: VirtualNodes, b: VirtualNodes) -> VirtualNodes:
    if len(a) == 0:
        return b
    if len(b) == 0:
        return a
    codes = np.concatenate([a.codes, b.codes])
    order = np.argsort(codes, kind="stable")
    cat = lambda x, y: np.concatenate([x, y])[order]
    return VirtualNodes(a.level, a.depth, codes[order], cat(a.source, b.source), cat(a.centers, b.centers),
                        cat(a.normals, b.normals), cat(a.radii, b.radii))


def step(prev: VirtualNodes | None, leaf_codes, leaf_source, leaf_centers, leaf_normals, leaf_radii,
         level: int, depth: int) -> VirtualNodes:
    """Virtual nodes at ``level`` from those at ``level - 1`` plus the leaves at ``level - 1``."""
    from_leaves = expand(leaf_codes, level, depth, leaf_source, leaf_centers, leaf_normals, leaf_radii)
    if prev is None or len(prev) == 0:
        return from_leaves
    from_prev = expand(prev.codes, level, depth, prev.source, prev.centers, prev.normals, prev.radii)
    return _merge(from_prev, from_leaves)


@dataclass(frozen=True)
class LevelContext:
    """Node sets seen when coding level ``level``.

    ``unknown``: all children of split nodes at ``level - 1`` (their
    occupancy is coded); ``virtual``: rasterized ancestor leaves;
    ``split``: the split parents at ``level - 1``.
    """

    level: int
    unknown: np.ndarray
    virtual: VirtualNodes
    split: np.ndarray

    def virtual_neighbor_count(self, codes) -> np.ndarray:
        codes = np.asarray(codes, dtype=np.int64)
        nb, valid = neighbor_codes(codes, self.level, FACE_OFFSETS)
        return count_present(nb, valid, self.virtual.codes)


def rasterize_context(tree: SurfelOctree, level: int) -> LevelContext:
    """Build the context for coding ``level`` from levels ``< level`` of ``tree``."""
    flat_base = {}
    base = 0
    for l in tree.leaf_levels:
        flat_base[l] = base
        base += len(tree.leaf_set(l))
    virtual = None
    for l in range(tree.l_min + 1, level + 1):
        s = tree.leaf_set(l - 1)
        w = tree.width(l - 1)
        if len(s):
            centers = morton_decode(s.codes, l - 1).astype(np.float64) * w + s.offsets
            src = flat_base.get(l - 1, 0) + np.arange(len(s))
        else:
            centers = np.zeros((0, 3))
            src = np.zeros(0, np.int64)
        virtual = step(virtual, s.codes, src, centers, s.normals, s.radii, l, tree.depth)
    if virtual is None:
        virtual = VirtualNodes.empty(level, tree.depth)
    if level > 0:
        parents = tree.nodes[level - 1]
        split = parents.codes[~parents.leaf]
    else:
        split = np.zeros(0, np.int64)
    unknown = (split[:, None] * 8 + np.arange(8)).reshape(-1)
    return LevelContext(level, unknown, virtual, split)
