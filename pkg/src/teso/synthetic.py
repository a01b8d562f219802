"""Voxelized synthetic point clouds (sphere, plane, torus) with smooth colors.

Each generator samples the analytic surface densely, snaps the samples to
the voxel grid and removes duplicates. The surface size is calibrated so the
voxel count lands within about 1% of ``n_points`` (no voxels are dropped, so
the surface stays hole free). Normals are the analytic ones at the voxel
centers.
"""

from __future__ import annotations

import math

import numpy as np

from .core.types import LeafSet, PointCloud, SurfelOctree


def _colors(pos, depth):
    t = pos / float(1 << depth)
    r = 0.5 + 0.4 * np.sin(2 * np.pi * (1.3 * t[:, 0] + 0.2))
    g = 0.5 + 0.4 * np.sin(2 * np.pi * (1.7 * t[:, 1] + 0.5 * t[:, 2]))
    b = 0.5 + 0.4 * np.cos(2 * np.pi * (1.1 * t[:, 2] + 0.3 * t[:, 0]))
    return np.clip(np.stack([r, g, b], axis=1), 0.0, 1.0)


def _voxelize(samples, depth):
    v = np.floor(samples).astype(np.int64)
    v = v[(v >= 0).all(axis=1) & (v < (1 << depth)).all(axis=1)]
    key = np.unique((v[:, 0] << (2 * depth)) | (v[:, 1] << depth) | v[:, 2])
    mask = (1 << depth) - 1
    return np.stack([key >> (2 * depth), (key >> depth) & mask, key & mask], axis=1)


def _calibrated(make, n_points, depth):
    # voxel count scales with area, i.e. with the square of the size factor
    vox = _voxelize(make(1.0), depth)
    return _voxelize(make(math.sqrt(n_points / max(len(vox), 1))), depth)


def _finish(vox, normal_fn, depth):
    pos = vox.astype(np.float64)
    normals = normal_fn(pos + 0.5)
    return PointCloud(depth, pos, _colors(pos, depth), normals)


def _unit(rng, m):
    d = rng.normal(size=(m, 3))
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def sphere_radius_for(n_points: int) -> float:
    # a voxelized sphere shell has about 4*pi*R^2 * 1.25 voxels
    return math.sqrt(n_points / (4 * math.pi * 1.25))


def sphere(n_points: int = 100_000, depth: int = 10, radius: float | None = None, center=None,
           seed: int = 0) -> PointCloud:
    """Sphere shell; ``radius`` (voxels) overrides the point-count calibration."""
    c = np.full(3, (1 << depth) / 2.0) if center is None else np.asarray(center, dtype=np.float64)

    def make(scale, R0=sphere_radius_for(n_points)):
        R = R0 * scale
        rng = np.random.default_rng(seed)
        return c + R * _unit(rng, int(max(4 * math.pi * R * R * 12, 1000)))

    def normal_fn(p):
        v = p - c
        return v / np.linalg.norm(v, axis=1, keepdims=True)

    if radius is not None:
        vox = _voxelize(make(1.0, radius), depth)
    else:
        vox = _calibrated(make, n_points, depth)
    return _finish(vox, normal_fn, depth)


def plane(n_points: int = 100_000, depth: int = 10, normal=(0.2, 0.3, 1.0), seed: int = 0) -> PointCloud:
    """A tilted square patch of a plane through the cube center."""
    n = np.asarray(normal, dtype=np.float64)
    n /= np.linalg.norm(n)
    a = np.cross(n, [1.0, 0.0, 0.0] if abs(n[0]) < 0.9 else [0.0, 1.0, 0.0])
    a /= np.linalg.norm(a)
    b = np.cross(n, a)
    # voxels per unit area on a plane is about the L1/L2 ratio of its normal
    dens = np.abs(n).sum() / np.abs(n).max()
    c = np.full(3, (1 << depth) / 2.0)

    def make(scale):
        half = 0.5 * math.sqrt(n_points / dens) * scale
        rng = np.random.default_rng(seed)
        st = rng.uniform(-half, half, size=(int(max((2 * half) ** 2 * 12, 1000)), 2))
        return c + st[:, :1] * a + st[:, 1:] * b

    vox = _calibrated(make, n_points, depth)
    return _finish(vox, lambda p: np.broadcast_to(n, p.shape).copy(), depth)


def torus(n_points: int = 100_000, depth: int = 10, ratio: float = 0.35, seed: int = 0) -> PointCloud:
    """Torus around +z; ``ratio`` is minor over major radius."""
    # area 4 pi^2 R r
    R0 = math.sqrt(n_points / (1.25 * 4 * math.pi**2 * ratio))
    c = np.full(3, (1 << depth) / 2.0)
    radii = {}

    def make(scale):
        R = R0 * scale
        r = ratio * R
        radii["R"] = R
        rng = np.random.default_rng(seed)
        m = int(max(4 * math.pi**2 * R * r * 12, 1000))
        # area-uniform sampling by rejection on the minor angle
        th = rng.uniform(0, 2 * np.pi, size=2 * m)
        ph = rng.uniform(0, 2 * np.pi, size=2 * m)
        keep = rng.uniform(0, 1, size=2 * m) < (R + r * np.cos(ph)) / (R + r)
        th, ph = th[keep], ph[keep]
        rho = R + r * np.cos(ph)
        return c + np.stack([rho * np.cos(th), rho * np.sin(th), r * np.sin(ph)], axis=1)

    vox = _calibrated(make, n_points, depth)
    R = radii["R"]

    def normal_fn(p):
        q = p - c
        rho = np.hypot(q[:, 0], q[:, 1])
        ring = np.stack([q[:, 0] / rho * R, q[:, 1] / rho * R, np.zeros(len(q))], axis=1)
        v = q - ring
        return v / np.linalg.norm(v, axis=1, keepdims=True)

    return _finish(vox, normal_fn, depth)


def plane_cut_tree(n_leaves: int = 4000, level: int = 8, depth: int = 10, spread: float = 0.3,
                   samples: int = 24, seed: int = 0) -> SurfelOctree:
    """Unquantized tree whose leaves are random planes cut by their cubes.

    Each leaf cube is crossed by a plane with a random normal, passing at
    distance ``|N(0, spread * b)|`` from the cube center on the side the
    normal points to, so the surfel offset (centroid of the cut) leans along
    the normal. The radius is the farthest cut sample from that centroid.
    """
    rng = np.random.default_rng(seed)
    b = float(1 << (depth - level))
    codes = np.unique(rng.integers(0, 8 ** level, size=2 * n_leaves))
    codes = np.sort(rng.permutation(codes)[:n_leaves])
    n = codes.size
    normals = rng.normal(size=(n, 3))
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    d = np.minimum(np.abs(rng.normal(0.0, spread * b, size=n)), 0.45 * b)
    g = (np.arange(samples) + 0.5) / samples * 2.0 - 1.0
    uu, vv = [a.ravel() * b for a in np.meshgrid(g, g)]
    offsets = np.empty((n, 3))
    radii = np.empty(n)
    half = np.full(3, b / 2.0)
    for i in range(n):
        nv = normals[i]
        u = np.cross(nv, [1.0, 0, 0] if abs(nv[0]) < 0.9 else [0, 1.0, 0])
        u /= np.linalg.norm(u)
        v = np.cross(nv, u)
        p = half + d[i] * nv + uu[:, None] * u + vv[:, None] * v
        p = p[np.all((p >= 0) & (p < b), axis=1)]
        o = p.mean(axis=0)
        offsets[i] = o
        radii[i] = np.sqrt(((p - o) ** 2).sum(axis=1).max())
    sizes = {level: {6: 12, 7: 8, 8: 4}.get(level, 4)}
    leaves = {level: LeafSet(codes, offsets, normals, np.maximum(radii, 1e-3))}
    return SurfelOctree.from_leaves(depth, (level,), sizes, leaves)


FIXTURES = {"sphere": sphere, "plane": plane, "torus": torus}
