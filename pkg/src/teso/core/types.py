"""Domain types shared across the package.

Coordinates are in voxel units: an input cloud of ``depth`` bits lives in
``[0, 2**depth)**3``. A node at level ``l`` is a cube of width
``2**(depth - l)`` voxels. All containers freeze their arrays after
construction so trees and clouds can be shared between threads.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .morton import morton_decode, morton_encode

SQRT3_2 = float(np.sqrt(3.0) / 2.0)


class PreconditionError(ValueError):
    """An input violates the documented contract of an operation."""


def _frozen(a, dtype=None) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class PointCloud:
    """Colored points on a ``2**depth`` voxel grid, optionally with unit normals."""

    depth: int
    positions: np.ndarray
    colors: np.ndarray
    normals: np.ndarray | None = None

    def __post_init__(self):
        pos = _frozen(np.reshape(self.positions, (-1, 3)), np.float64)
        col = _frozen(np.reshape(self.colors, (-1, 3)), np.float64)
        if pos.shape != col.shape:
            raise PreconditionError("positions and colors differ in length")
        if not 0 < self.depth <= 21:
            raise PreconditionError(f"depth {self.depth} outside (0, 21]")
        if pos.size and (pos.min() < 0 or pos.max() >= 2**self.depth):
            raise PreconditionError(f"positions outside [0, 2**{self.depth})")
        if col.size and (col.min() < 0 or col.max() > 1):
            raise PreconditionError("colors outside [0, 1]")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "colors", col)
        if self.normals is not None:
            nrm = _frozen(np.reshape(self.normals, (-1, 3)), np.float64)
            if nrm.shape != pos.shape:
                raise PreconditionError("normals and positions differ in length")
            if nrm.size and np.max(np.abs(np.linalg.norm(nrm, axis=1) - 1.0)) > 1e-6:
                raise PreconditionError("normals must have unit norm")
            object.__setattr__(self, "normals", nrm)

    def __len__(self) -> int:
        return self.positions.shape[0]

    @property
    def has_normals(self) -> bool:
        return self.normals is not None

    def with_normals(self, normals: np.ndarray) -> "PointCloud":
        return PointCloud(self.depth, self.positions, self.colors, normals)


@dataclass(frozen=True)
class OctreeCube:
    level: int
    coords: tuple[int, int, int]
    depth: int

    def __post_init__(self):
        if not 0 <= self.level <= self.depth:
            raise PreconditionError("cube level outside [0, depth]")
        if any(not 0 <= c < (1 << self.level) for c in self.coords):
            raise PreconditionError(f"coords {self.coords} invalid at level {self.level}")

    @property
    def width(self) -> float:
        return float(1 << (self.depth - self.level))

    @property
    def anchor(self) -> np.ndarray:
        return np.asarray(self.coords, dtype=np.float64) * self.width

    @property
    def code(self) -> int:
        return morton_encode(self.coords, self.level)

    @classmethod
    def from_code(cls, code: int, level: int, depth: int) -> "OctreeCube":
        return cls(level, morton_decode(int(code), level), depth)


@dataclass(frozen=True)
class Surfel:
    offset: np.ndarray
    normal: np.ndarray
    radius: float

    def center(self, anchor) -> np.ndarray:
        return np.asarray(anchor, dtype=np.float64) + np.asarray(self.offset, dtype=np.float64)

    def check(self, width: float) -> None:
        off = np.asarray(self.offset)
        if np.any(off < 0) or np.any(off >= width):
            raise PreconditionError("surfel offset outside [0, b)")
        if abs(np.linalg.norm(self.normal) - 1.0) > 1e-6:
            raise PreconditionError("surfel normal not unit length")
        if not 0 < self.radius <= SQRT3_2 * width * (1 + 1e-12):
            raise PreconditionError("surfel radius outside (0, sqrt(3)/2 b]")


@dataclass(frozen=True)
class TexturePatch:
    """``M x M`` RGB pixels over the tangent square ``[-r, r]**2``.

    ``pixels[j, i]``: column ``i`` runs along the frame's u axis, row ``j``
    along v.
    """

    pixels: np.ndarray

    def __post_init__(self):
        px = _frozen(self.pixels, np.float64)
        if px.ndim != 3 or px.shape[0] != px.shape[1] or px.shape[2] != 3:
            raise PreconditionError("patch must be M x M x 3")
        object.__setattr__(self, "pixels", px)

    @property
    def size(self) -> int:
        return self.pixels.shape[0]


@dataclass(frozen=True)
class LevelNodes:
    """Occupied nodes of one level in Morton order with their leaf flags."""

    codes: np.ndarray
    leaf: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "codes", _frozen(self.codes, np.int64))
        object.__setattr__(self, "leaf", _frozen(self.leaf, bool))


@dataclass(frozen=True)
class LeafSet:
    """Surfel attributes of all leaves at one level, in Morton order.

    ``q_offset``/``q_normal``/``q_radius`` hold integer quantization indices
    when the tree has been quantized; the real-valued attributes then hold
    the reconstructions.
    """

    codes: np.ndarray
    offsets: np.ndarray
    normals: np.ndarray
    radii: np.ndarray
    patches: np.ndarray | None = None
    q_offset: np.ndarray | None = None
    q_normal: np.ndarray | None = None
    q_radius: np.ndarray | None = None

    def __post_init__(self):
        n = np.asarray(self.codes).shape[0]
        object.__setattr__(self, "codes", _frozen(self.codes, np.int64))
        object.__setattr__(self, "offsets", _frozen(np.reshape(self.offsets, (n, 3)), np.float64))
        object.__setattr__(self, "normals", _frozen(np.reshape(self.normals, (n, 3)), np.float64))
        object.__setattr__(self, "radii", _frozen(np.reshape(self.radii, (n,)), np.float64))
        if self.patches is not None:
            object.__setattr__(self, "patches", _frozen(self.patches, np.float64))
        for name, shape in (("q_offset", (n, 3)), ("q_normal", (n, 2)), ("q_radius", (n,))):
            val = getattr(self, name)
            if val is not None:
                object.__setattr__(self, name, _frozen(np.reshape(val, shape), np.int64))

    def __len__(self) -> int:
        return self.codes.shape[0]

    @property
    def quantized(self) -> bool:
        return self.q_offset is not None

    @classmethod
    def empty(cls) -> "LeafSet":
        return cls(np.zeros(0, np.int64), np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0))


DEFAULT_PATCH_SIZES = {6: 12, 7: 8, 8: 4}


def default_patch_sizes(leaf_levels) -> dict[int, int]:
    """M per leaf level: 12/8/4 on levels 6/7/8, extended by level offset elsewhere."""
    levels = sorted(leaf_levels)
    if set(levels) <= set(DEFAULT_PATCH_SIZES):
        return {l: DEFAULT_PATCH_SIZES[l] for l in levels}
    # keep the same relative schedule anchored at the finest level
    sched = [4, 8, 12, 16, 16, 16, 16, 16]
    return {l: sched[min(levels[-1] - l, len(sched) - 1)] for l in levels}


@dataclass(frozen=True)
class SurfelOctree:
    """Textured surfel octree.

    ``nodes`` maps every level ``0..l_max`` to its occupied nodes; a node is
    either split or a leaf. ``leaves`` maps each leaf level to its surfels.
    """

    depth: int
    leaf_levels: tuple[int, ...]
    patch_sizes: dict[int, int]
    nodes: dict[int, LevelNodes]
    leaves: dict[int, LeafSet]

    def __post_init__(self):
        levels = tuple(sorted(int(l) for l in self.leaf_levels))
        if not levels:
            raise PreconditionError("at least one leaf level is required")
        if len(set(levels)) != len(levels) or levels[0] < 0 or levels[-1] > self.depth:
            raise PreconditionError(f"invalid leaf levels {self.leaf_levels} for depth {self.depth}")
        object.__setattr__(self, "leaf_levels", levels)
        object.__setattr__(self, "patch_sizes", {int(k): int(v) for k, v in self.patch_sizes.items()})

    @property
    def l_min(self) -> int:
        return self.leaf_levels[0]

    @property
    def l_max(self) -> int:
        return self.leaf_levels[-1]

    @property
    def sigma(self) -> float:
        return float(1 << (self.depth - self.l_max))

    def width(self, level: int) -> float:
        return float(1 << (self.depth - level))

    @property
    def n_leaves(self) -> int:
        return sum(len(s) for s in self.leaves.values())

    @property
    def quantized(self) -> bool:
        return all(s.quantized for s in self.leaves.values() if len(s))

    @property
    def has_patches(self) -> bool:
        return all(s.patches is not None for s in self.leaves.values() if len(s))

    def is_empty(self) -> bool:
        return self.n_leaves == 0

    def leaf_set(self, level: int) -> LeafSet:
        return self.leaves.get(level, LeafSet.empty())

    def node_state(self, level: int, coords) -> str | None:
        """``'split'``, ``'leaf'`` or ``None`` for an unoccupied node."""
        nodes = self.nodes.get(level)
        if nodes is None or nodes.codes.size == 0:
            return None
        code = morton_encode(coords, level)
        i = int(np.searchsorted(nodes.codes, code))
        if i >= nodes.codes.size or nodes.codes[i] != code:
            return None
        return "leaf" if nodes.leaf[i] else "split"

    def iter_leaves(self) -> Iterator[tuple[OctreeCube, Surfel, TexturePatch | None]]:
        for level in self.leaf_levels:
            s = self.leaf_set(level)
            coords = morton_decode(s.codes, level)
            for i in range(len(s)):
                cube = OctreeCube(level, tuple(int(c) for c in coords[i]), self.depth)
                surfel = Surfel(s.offsets[i], s.normals[i], float(s.radii[i]))
                patch = TexturePatch(s.patches[i]) if s.patches is not None else None
                yield cube, surfel, patch

    def flat(self) -> "FlatSurfels":
        """All leaves as aligned arrays: levels ascending, Morton order within a level."""
        parts = []
        for level in self.leaf_levels:
            s = self.leaf_set(level)
            if not len(s):
                continue
            w = self.width(level)
            anchors = morton_decode(s.codes, level).astype(np.float64) * w
            parts.append((level, s, anchors, w))
        if not parts:
            z3 = np.zeros((0, 3))
            return FlatSurfels(np.zeros(0, np.int64), np.zeros(0, np.int64), z3, np.zeros(0), z3, z3, np.zeros(0))
        levels = np.concatenate([np.full(len(s), l, np.int64) for l, s, _, _ in parts])
        codes = np.concatenate([s.codes for _, s, _, _ in parts])
        anchors = np.concatenate([a for _, _, a, _ in parts])
        widths = np.concatenate([np.full(len(s), w) for _, s, _, w in parts])
        centers = anchors + np.concatenate([s.offsets for _, s, _, _ in parts])
        normals = np.concatenate([s.normals for _, s, _, _ in parts])
        radii = np.concatenate([s.radii for _, s, _, _ in parts])
        return FlatSurfels(levels, codes, anchors, widths, centers, normals, radii)

    def with_leaves(self, leaves: dict[int, LeafSet]) -> "SurfelOctree":
        return dataclasses.replace(self, leaves=dict(leaves))

    def with_patches(self, patches: dict[int, np.ndarray]) -> "SurfelOctree":
        new = {}
        for level in self.leaf_levels:
            s = self.leaf_set(level)
            p = patches.get(level)
            if p is None:
                p = np.zeros((0, self.patch_sizes[level], self.patch_sizes[level], 3))
            new[level] = dataclasses.replace(s, patches=p)
        return self.with_leaves(new)

    def without_patches(self) -> "SurfelOctree":
        return self.with_leaves({l: dataclasses.replace(s, patches=None) for l, s in self.leaves.items()})

    def validate(self) -> None:
        """Check the structural invariants; raise ``ValueError`` on violation."""
        for level in range(self.l_max + 1):
            nodes = self.nodes.get(level)
            if nodes is None:
                raise ValueError(f"missing node list for level {level}")
            if nodes.codes.size and np.any(np.diff(nodes.codes) <= 0):
                raise ValueError(f"level {level} codes not strictly ascending")
            if level not in self.leaf_levels and nodes.leaf.any():
                raise ValueError(f"leaf at non-leaf level {level}")
            if level == self.l_max and not nodes.leaf.all():
                raise ValueError("every node at l_max must be a leaf")
            if level > 0 and nodes.codes.size:
                parents = self.nodes[level - 1]
                pc = nodes.codes >> 3
                pos = np.searchsorted(parents.codes, pc)
                ok = pos < parents.codes.size
                ok[ok] &= parents.codes[pos[ok]] == pc[ok]
                if not ok.all():
                    raise ValueError(f"orphan node at level {level}")
                if parents.leaf[pos].any():
                    raise ValueError(f"child of a leaf at level {level}")
                split_codes = parents.codes[~parents.leaf]
                if not np.isin(split_codes, pc).all():
                    raise ValueError(f"split node without children at level {level - 1}")
            s = self.leaf_set(level)
            if not np.array_equal(s.codes, nodes.codes[nodes.leaf]):
                raise ValueError(f"leaf set mismatch at level {level}")
        if self.nodes.get(0) is not None and self.nodes[0].codes.size > 1:
            raise ValueError("more than one root")

    def same_geometry(self, other: "SurfelOctree", quantized: bool = True) -> bool:
        """Structural and attribute equality (indices if ``quantized``)."""
        if (self.depth, self.leaf_levels) != (other.depth, other.leaf_levels):
            return False
        for level in range(self.l_max + 1):
            a, b = self.nodes[level], other.nodes[level]
            if not (np.array_equal(a.codes, b.codes) and np.array_equal(a.leaf, b.leaf)):
                return False
        for level in self.leaf_levels:
            a, b = self.leaf_set(level), other.leaf_set(level)
            if len(a) == 0 and len(b) == 0:
                continue
            if quantized:
                fields = ("codes", "q_offset", "q_normal", "q_radius")
            else:
                fields = ("codes", "offsets", "normals", "radii")
            for f in fields:
                x, y = getattr(a, f), getattr(b, f)
                if (x is None) != (y is None):
                    return False
                if x is not None and not np.array_equal(x, y):
                    return False
        return True

    @classmethod
    def from_leaves(cls, depth: int, leaf_levels, patch_sizes, leaves: dict[int, LeafSet]) -> "SurfelOctree":
        """Derive the node hierarchy from the leaf sets."""
        levels = sorted(leaf_levels)
        l_max = levels[-1]
        leaf_codes = {l: leaves.get(l, LeafSet.empty()).codes for l in range(l_max + 1)}
        nodes: dict[int, LevelNodes] = {}
        below = np.zeros(0, np.int64)  # codes at level+1 (occupied)
        for level in range(l_max, -1, -1):
            lc = leaf_codes.get(level, np.zeros(0, np.int64))
            split = np.unique(below >> 3) if below.size else np.zeros(0, np.int64)
            codes = np.concatenate([lc, split])
            order = np.argsort(codes, kind="stable")
            codes = codes[order]
            is_leaf = np.concatenate([np.ones(lc.size, bool), np.zeros(split.size, bool)])[order]
            if codes.size and np.any(np.diff(codes) == 0):
                raise PreconditionError(f"leaf overlaps a split node at level {level}")
            nodes[level] = LevelNodes(codes, is_leaf)
            below = codes
        full = {l: leaves.get(l, LeafSet.empty()) for l in levels}
        return cls(depth, tuple(levels), dict(patch_sizes), nodes, full)

    @classmethod
    def empty(cls, depth: int, leaf_levels, patch_sizes=None) -> "SurfelOctree":
        ps = patch_sizes or default_patch_sizes(leaf_levels)
        return cls.from_leaves(depth, leaf_levels, ps, {})


@dataclass(frozen=True)
class FlatSurfels:
    levels: np.ndarray
    codes: np.ndarray
    anchors: np.ndarray
    widths: np.ndarray
    centers: np.ndarray
    normals: np.ndarray
    radii: np.ndarray

    def __len__(self) -> int:
        return self.levels.shape[0]
