"""Surfel tangent frames, texture patch sampling and Morton-order patch packing."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass
from pathlib import Path

import numba as nb
import numpy as np

from .core.container import FormatError
from .core.morton import CUBE27_OFFSETS, morton_decode, morton_encode, neighbor_codes, slot_position
from .core.types import OctreeCube, PointCloud, PreconditionError, Surfel, SurfelOctree, TexturePatch

EPS_DIST = 1e-6


@dataclass(frozen=True)
class TangentFrame:
    u: np.ndarray
    v: np.ndarray
    n: np.ndarray
    origin: np.ndarray
    quaternion: np.ndarray
    angle: float
    axis: np.ndarray


def _quat_rotate(q: np.ndarray, vec: np.ndarray) -> np.ndarray:
    w = q[..., :1]
    xyz = q[..., 1:]
    t = 2.0 * np.cross(xyz, vec)
    return vec + w * t + np.cross(xyz, t)


def frame_quaternions(normals) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Quaternions rotating +z onto each normal, with their angles and axes.

    The axis is ``normalize(z x n)``; ``n = z`` gives the identity and
    ``n = -z`` a half turn about +x.
    """
    n = np.asarray(normals, dtype=np.float64).reshape(-1, 3)
    cz = np.clip(n[:, 2], -1.0, 1.0)
    angle = np.arccos(cz)
    axis = np.stack([-n[:, 1], n[:, 0], np.zeros_like(cz)], axis=1)  # z x n
    s = np.linalg.norm(axis, axis=1)
    deg = s < 1e-12
    axis = np.where(deg[:, None], np.array([1.0, 0.0, 0.0]), axis / np.where(deg, 1.0, s)[:, None])
    angle = np.where(deg, np.where(cz > 0, 0.0, np.pi), angle)
    half = angle / 2.0
    q = np.concatenate([np.cos(half)[:, None], axis * np.sin(half)[:, None]], axis=1)
    q[deg & (cz > 0)] = (1.0, 0.0, 0.0, 0.0)
    q[deg & (cz <= 0)] = (0.0, 1.0, 0.0, 0.0)
    return q, angle, axis


def tangent_axes(normals) -> tuple[np.ndarray, np.ndarray]:
    """In-plane axes ``(u, v)`` for an array of unit normals."""
    n = np.asarray(normals, dtype=np.float64).reshape(-1, 3)
    q, _, _ = frame_quaternions(n)
    ex = np.broadcast_to(np.array([1.0, 0.0, 0.0]), n.shape)
    ey = np.broadcast_to(np.array([0.0, 1.0, 0.0]), n.shape)
    return _quat_rotate(q, ex), _quat_rotate(q, ey)


def tangent_frame(normal, origin=(0.0, 0.0, 0.0)) -> TangentFrame:
    n = np.asarray(normal, dtype=np.float64)
    if n.shape != (3,) or abs(np.linalg.norm(n) - 1.0) > 1e-6:
        raise PreconditionError("tangent_frame needs a unit 3-vector")
    q, angle, axis = frame_quaternions(n)
    u, v = tangent_axes(n)
    return TangentFrame(u[0], v[0], n.copy(), np.asarray(origin, dtype=np.float64), q[0], float(angle[0]), axis[0])


def rotate(q, vec) -> np.ndarray:
    return _quat_rotate(np.asarray(q, dtype=np.float64), np.asarray(vec, dtype=np.float64))


# --------------------------------------------------------------------------- sampling


class PointIndex:
    """Points bucketed by octree cube, per level, for neighborhood queries."""

    def __init__(self, cloud: PointCloud):
        self.cloud = cloud
        self._levels: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    def level(self, level: int) -> tuple[np.ndarray, np.ndarray]:
        """``(sorted_keys, order)``: Morton keys of point cubes and the sorting permutation."""
        if level not in self._levels:
            w = float(1 << (self.cloud.depth - level))
            coords = np.floor(self.cloud.positions / w).astype(np.int64)
            keys = morton_encode(coords, level) if len(coords) else np.zeros(0, np.int64)
            order = np.argsort(keys, kind="stable")
            self._levels[level] = (keys[order], order)
        return self._levels[level]

    def neighborhood_ranges(self, codes: np.ndarray, level: int) -> tuple[np.ndarray, np.ndarray]:
        """Start/end offsets into the level's sorted order for the 27 cubes around each code."""
        keys, _ = self.level(level)
        nbr, valid = neighbor_codes(codes, level, CUBE27_OFFSETS)
        lo = np.searchsorted(keys, nbr, side="left")
        hi = np.searchsorted(keys, nbr, side="right")
        hi = np.where(valid, hi, lo)
        return lo.astype(np.int64), hi.astype(np.int64)


@nb.njit(cache=True, parallel=True)
def _sample_kernel(pos, col, order, lo, hi, centers, normals, us, vs, radii, M, K, d_thresh, out):
    n_leaves = centers.shape[0]
    for s in nb.prange(n_leaves):
        # gather the 27-cube neighborhood
        total = 0
        for c in range(lo.shape[1]):
            total += hi[s, c] - lo[s, c]
        cand = np.empty(total, np.int64)
        near = np.empty(total, np.bool_)
        k = 0
        nx, ny, nz = normals[s, 0], normals[s, 1], normals[s, 2]
        px, py, pz = centers[s, 0], centers[s, 1], centers[s, 2]
        n_near = 0
        for c in range(lo.shape[1]):
            for j in range(lo[s, c], hi[s, c]):
                idx = order[j]
                cand[k] = idx
                h = (pos[idx, 0] - px) * nx + (pos[idx, 1] - py) * ny + (pos[idx, 2] - pz) * nz
                near[k] = abs(h) <= d_thresh
                if near[k]:
                    n_near += 1
                k += 1
        r = radii[s]
        step = 2.0 * r / M
        best_d = np.empty(K, np.float64)
        best_i = np.empty(K, np.int64)
        for j in range(M):
            b = -r + (j + 0.5) * step
            for i in range(M):
                a = -r + (i + 0.5) * step
                qx = px + us[s, 0] * a + vs[s, 0] * b
                qy = py + us[s, 1] * a + vs[s, 1] * b
                qz = pz + us[s, 2] * a + vs[s, 2] * b
                nfound = 0
                use_filter = n_near > 0
                kk = K if use_filter else 1
                for t in range(total):
                    if use_filter and not near[t]:
                        continue
                    idx = cand[t]
                    dx = pos[idx, 0] - qx
                    dy = pos[idx, 1] - qy
                    dz = pos[idx, 2] - qz
                    d = np.sqrt(dx * dx + dy * dy + dz * dz)
                    # keep the K smallest, ties resolved by scan order
                    if nfound < kk:
                        p = nfound
                        nfound += 1
                    elif d < best_d[nfound - 1]:
                        p = nfound - 1
                    else:
                        continue
                    while p > 0 and best_d[p - 1] > d:
                        best_d[p] = best_d[p - 1]
                        best_i[p] = best_i[p - 1]
                        p -= 1
                    best_d[p] = d
                    best_i[p] = idx
                if nfound == 0:
                    continue
                if best_d[0] < EPS_DIST:
                    for ch in range(3):
                        out[s, j, i, ch] = col[best_i[0], ch]
                    continue
                wsum = 0.0
                acc0 = 0.0
                acc1 = 0.0
                acc2 = 0.0
                for t in range(nfound):
                    w = 1.0 / (EPS_DIST + best_d[t])
                    wsum += w
                    acc0 += w * col[best_i[t], 0]
                    acc1 += w * col[best_i[t], 1]
                    acc2 += w * col[best_i[t], 2]
                out[s, j, i, 0] = acc0 / wsum
                out[s, j, i, 1] = acc1 / wsum
                out[s, j, i, 2] = acc2 / wsum


def _sample_level(index: PointIndex, codes, level, centers, normals, radii, M, K, d_thresh) -> np.ndarray:
    n = len(codes)
    out = np.zeros((n, M, M, 3))
    if n == 0:
        return out
    _, order = index.level(level)
    lo, hi = index.neighborhood_ranges(codes, level)
    us, vs = tangent_axes(normals)
    _sample_kernel(
        index.cloud.positions, index.cloud.colors, order, lo, hi,
        np.ascontiguousarray(centers), np.ascontiguousarray(normals), us, vs,
        np.ascontiguousarray(radii, dtype=np.float64), M, K, float(d_thresh), out,
    )
    return np.clip(out, 0.0, 1.0)


def sample_patch(surfel: Surfel, cube: OctreeCube, index: PointIndex | PointCloud, M: int,
                 K: int = 3, d_thresh: float | None = None) -> TexturePatch:
    """Sample one ``M x M`` patch for ``surfel`` from the cloud around ``cube``.

    Pixel colors are inverse-distance weighted over the ``K`` nearest points
    among the 27 cubes around ``cube`` whose distance to the surfel plane is
    at most ``d_thresh`` (default: half the cube width). Without any such
    point a pixel takes the color of the nearest neighborhood point.
    """
    if isinstance(index, PointCloud):
        index = PointIndex(index)
    if d_thresh is None:
        d_thresh = cube.width / 2.0
    center = cube.anchor + np.asarray(surfel.offset, dtype=np.float64)
    out = _sample_level(
        index, np.array([cube.code]), cube.level, center[None], np.asarray(surfel.normal, dtype=np.float64)[None],
        np.array([surfel.radius]), M, K, d_thresh,
    )
    return TexturePatch(out[0])


def sample_patches(tree: SurfelOctree, cloud: PointCloud | PointIndex, K: int = 3,
                   d_thresh: float | None = None) -> SurfelOctree:
    """Attach a texture patch to every leaf; ``d_thresh`` defaults to half the finest cube width."""
    index = cloud if isinstance(cloud, PointIndex) else PointIndex(cloud)
    if d_thresh is None:
        d_thresh = tree.sigma / 2.0
    patches = {}
    for level in tree.leaf_levels:
        s = tree.leaf_set(level)
        M = tree.patch_sizes[level]
        anchors = morton_decode(s.codes, level).astype(np.float64) * tree.width(level) if len(s) else np.zeros((0, 3))
        patches[level] = _sample_level(index, s.codes, level, anchors + s.offsets, s.normals, s.radii, M, K, d_thresh)
    return tree.with_patches(patches)


# --------------------------------------------------------------------------- packing


@dataclass(frozen=True)
class PackedTextureImage:
    level: int
    patch_size: int
    grid_side: int
    n_patches: int
    image: np.ndarray

    @property
    def side(self) -> int:
        return self.grid_side * self.patch_size


def grid_side_for(n: int) -> int:
    if n <= 0:
        return 0
    side = 1
    while side * side < n:
        side *= 2
    return side


def pack_array(patches: np.ndarray, level: int = 0) -> PackedTextureImage:
    """Place ``patches[k]`` at Morton slot ``k`` of a power-of-two slot grid."""
    patches = np.asarray(patches, dtype=np.float64)
    n = patches.shape[0]
    M = patches.shape[1] if patches.ndim == 4 else 0
    g = grid_side_for(n)
    image = np.zeros((g * M, g * M, 3))
    if n:
        image[:] = patches.reshape(-1, 3).mean(axis=0)
        cols, rows = slot_position(np.arange(n))
        for k in range(n):
            r0, c0 = rows[k] * M, cols[k] * M
            image[r0:r0 + M, c0:c0 + M] = patches[k]
    return PackedTextureImage(level, M, g, n, image)


def unpack_array(packed: PackedTextureImage) -> np.ndarray:
    M, n = packed.patch_size, packed.n_patches
    out = np.zeros((n, M, M, 3))
    if n == 0:
        return out
    expect = packed.grid_side * M
    if packed.image.shape[:2] != (expect, expect):
        raise FormatError(f"packed image is {packed.image.shape[:2]}, expected {(expect, expect)}")
    cols, rows = slot_position(np.arange(n))
    for k in range(n):
        r0, c0 = rows[k] * M, cols[k] * M
        out[k] = packed.image[r0:r0 + M, c0:c0 + M]
    return out


def pack_patches(tree: SurfelOctree, level: int) -> PackedTextureImage:
    s = tree.leaf_set(level)
    M = tree.patch_sizes[level]
    if s.patches is None:
        raise PreconditionError(f"leaves at level {level} carry no patches")
    if s.patches.shape[1:] != (M, M, 3):
        raise RuntimeError(f"patch size {s.patches.shape[1]} at level {level} does not match M={M}")
    packed = pack_array(s.patches, level)
    return dataclasses.replace(packed, patch_size=M)


def unpack_patches(packed: PackedTextureImage) -> np.ndarray:
    return unpack_array(packed)


def layout_for(tree: SurfelOctree, level: int) -> PackedTextureImage:
    """Empty layout (no pixels) describing how ``level`` would be packed."""
    n = len(tree.leaf_set(level))
    M = tree.patch_sizes[level]
    g = grid_side_for(n)
    return PackedTextureImage(level, M, g, n, np.zeros((0, 0, 3)))


# --------------------------------------------------------------------------- external export


MANIFEST_NAME = "manifest.txt"


def export_packed(images: list[PackedTextureImage], out_dir: str | os.PathLike) -> Path:
    """Write one 8-bit PNG per level plus a text manifest; returns the manifest path."""
    from PIL import Image

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["# level M grid_side leaf_count"]
    for img in images:
        lines.append(f"{img.level} {img.patch_size} {img.grid_side} {img.n_patches}")
        if img.n_patches:
            px = np.clip(np.rint(img.image * 255.0), 0, 255).astype(np.uint8)
            Image.fromarray(px, mode="RGB").save(out / f"level_{img.level}.png")
    path = out / MANIFEST_NAME
    path.write_text("\n".join(lines) + "\n")
    return path


def read_manifest(path: str | os.PathLike) -> list[tuple[int, int, int, int]]:
    rows = []
    for ln, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 4:
            raise FormatError(f"manifest line {ln}: expected 4 fields")
        rows.append(tuple(int(p) for p in parts))
    return rows


def import_packed(manifest_path: str | os.PathLike, tree: SurfelOctree | None = None) -> dict[int, np.ndarray]:
    """Read (possibly externally recompressed) PNGs back into per-level patch arrays.

    With ``tree`` given, the manifest must agree with its leaf counts and
    patch sizes.
    """
    from PIL import Image

    base = Path(manifest_path).parent
    patches = {}
    for level, M, g, n in read_manifest(manifest_path):
        if tree is not None:
            if n != len(tree.leaf_set(level)) or M != tree.patch_sizes.get(level):
                raise FormatError(f"manifest level {level} does not match decoded geometry")
        if g != grid_side_for(n):
            raise FormatError(f"manifest level {level}: grid side {g} inconsistent with {n} leaves")
        if n == 0:
            patches[level] = np.zeros((0, M, M, 3))
            continue
        img = np.asarray(Image.open(base / f"level_{level}.png").convert("RGB"), dtype=np.float64) / 255.0
        if img.shape[:2] != (g * M, g * M):
            raise FormatError(f"level {level} image is {img.shape[:2]}, manifest says {(g * M, g * M)}")
        patches[level] = unpack_array(PackedTextureImage(level, M, g, n, img))
    return patches


def rasterize_colored_points(tree: SurfelOctree) -> PointCloud:
    """Texture pixel centers inside their bounding cubes as a colored point cloud."""
    pts, cols = [], []
    for level in tree.leaf_levels:
        s = tree.leaf_set(level)
        if not len(s) or s.patches is None:
            continue
        M = tree.patch_sizes[level]
        w = tree.width(level)
        anchors = morton_decode(s.codes, level).astype(np.float64) * w
        centers = anchors + s.offsets
        us, vs = tangent_axes(s.normals)
        g = (np.arange(M) + 0.5) / M * 2.0 - 1.0  # in units of r
        a = g[None, None, :] * s.radii[:, None, None]
        b = g[None, :, None] * s.radii[:, None, None]
        p = centers[:, None, None, :] + us[:, None, None, :] * a[..., None] + vs[:, None, None, :] * b[..., None]
        inside = np.all((p >= anchors[:, None, None, :]) & (p < anchors[:, None, None, :] + w), axis=-1)
        pts.append(p[inside])
        cols.append(s.patches[inside])
    if not pts:
        return PointCloud(tree.depth, np.zeros((0, 3)), np.zeros((0, 3)))
    p = np.concatenate(pts)
    c = np.clip(np.concatenate(cols), 0, 1)
    return PointCloud(tree.depth, p, c)
