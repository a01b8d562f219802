"""Surfel octree construction from a colored point cloud.

Levels are processed coarse to fine. Unvisited points are grouped into
occupied cubes; each cube gets a plane-fit surfel, and the cube becomes a
leaf when a surfel grid sampled on it matches the cube's points to within
the D1-PSNR threshold (or when the level is the last one).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numba as nb
import numpy as np
from scipy import sparse
from scipy.sparse import csgraph
from scipy.spatial import cKDTree

from .core.morton import morton_decode, morton_encode
from .core.types import (
    SQRT3_2,
    LeafSet,
    OctreeCube,
    PointCloud,
    PreconditionError,
    Surfel,
    SurfelOctree,
    default_patch_sizes,
)
from .texture import tangent_axes

log = logging.getLogger(__name__)

SUPPORTED_TAUS = (60.0, 62.0, 64.0, 66.0)


@dataclass(frozen=True)
class BuildConfig:
    """Parameters of the split-decision octree build.

    ``grid_step`` is the spacing (voxels) of the surfel sample grid used by
    the decision function; samples are snapped to the voxel lattice.
    """

    leaf_levels: tuple[int, ...] = (6, 7, 8)
    tau: float = 66.0
    grid_step: float = 0.5
    k_normals: int = 16
    patch_sizes: dict[int, int] | None = None
    snap_samples: bool = True

    def __post_init__(self):
        levels = tuple(sorted(int(l) for l in self.leaf_levels))
        if not levels or len(set(levels)) != len(levels) or levels[0] < 0:
            raise PreconditionError(f"invalid leaf levels {self.leaf_levels}")
        object.__setattr__(self, "leaf_levels", levels)
        if self.grid_step <= 0:
            raise PreconditionError("grid_step must be positive")

    def sizes(self) -> dict[int, int]:
        return dict(self.patch_sizes) if self.patch_sizes else default_patch_sizes(self.leaf_levels)

    @classmethod
    def for_depth(cls, depth: int, **kw) -> "BuildConfig":
        """Leaf levels ``depth-4 .. depth-2`` (``{6, 7, 8}`` at depth 10)."""
        levels = tuple(max(0, depth - k) for k in (4, 3, 2))
        return cls(leaf_levels=tuple(sorted(set(levels))), **kw)


# --------------------------------------------------------------------------- normals


@nb.njit(cache=True)
def _propagate_signs(order, pred, normals):
    for k in range(order.shape[0]):
        i = order[k]
        p = pred[i]
        if p < 0:
            continue
        d = normals[i, 0] * normals[p, 0] + normals[i, 1] * normals[p, 1] + normals[i, 2] * normals[p, 2]
        if d < 0:
            normals[i, 0] = -normals[i, 0]
            normals[i, 1] = -normals[i, 1]
            normals[i, 2] = -normals[i, 2]


def estimate_normals(cloud: PointCloud, k: int = 16, return_degenerate: bool = False):
    """PCA normals over k nearest neighbors, consistently oriented.

    Orientation follows a minimum spanning tree of the k-NN graph (edge
    weight ``1 - |n_i . n_j|``) from the highest point of each connected
    component, whose normal is made to point towards +z. Neighborhoods whose
    normal is undetermined (rank < 2) get ``(0, 0, 1)``.
    """
    n = len(cloud)
    if n < k + 1:
        raise PreconditionError(f"need at least k+1={k + 1} points, got {n}")
    pos = cloud.positions
    tree = cKDTree(pos)
    _, nbr = tree.query(pos, k=k + 1)
    nbr = np.asarray(nbr, dtype=np.int64)
    pts = pos[nbr]
    centered = pts - pts.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / (k + 1)
    evals, evecs = np.linalg.eigh(cov)
    normals = np.ascontiguousarray(evecs[:, :, 0])
    scale = np.maximum(evals[:, 2], 1e-300)
    degenerate = (evals[:, 2] <= 1e-12) | (evals[:, 1] <= 1e-9 * scale)
    normals[degenerate] = (0.0, 0.0, 1.0)
    n_deg = int(degenerate.sum())
    if n_deg:
        log.warning("estimate_normals: %d degenerate neighborhoods set to (0, 0, 1)", n_deg)

    # orientation: MST over the symmetric k-NN graph
    rows = np.repeat(np.arange(n), k)
    cols = nbr[:, 1:].reshape(-1)
    w = 1.0 - np.abs(np.einsum("ij,ij->i", normals[rows], normals[cols])) + 1e-9
    g = sparse.coo_matrix((w, (rows, cols)), shape=(n, n)).tocsr()
    g = g.maximum(g.T)
    mst = csgraph.minimum_spanning_tree(g)
    mst = mst + mst.T
    n_comp, labels = csgraph.connected_components(mst, directed=False)
    pred_all = np.full(n, -1, dtype=np.int64)
    order_parts = []
    z = pos[:, 2]
    for c in range(n_comp):
        members = np.flatnonzero(labels == c)
        seed = int(members[np.argmax(z[members])])
        if normals[seed, 2] < 0 and not degenerate[seed]:
            normals[seed] *= -1.0
        order, pred = csgraph.breadth_first_order(mst, seed, directed=False, return_predecessors=True)
        pred_all[order[1:]] = pred[order[1:]]
        order_parts.append(order)
    order_all = np.concatenate(order_parts).astype(np.int64)
    _propagate_signs(order_all, pred_all, normals)
    out = cloud.with_normals(normals)
    return (out, n_deg) if return_degenerate else out


# --------------------------------------------------------------------------- surfel fitting


def _fallback_normal(points: np.ndarray) -> np.ndarray:
    if len(points) < 3:
        return np.array([0.0, 0.0, 1.0])
    c = points - points.mean(axis=0)
    evals, evecs = np.linalg.eigh(c.T @ c)
    if evals[1] <= 1e-9 * max(evals[2], 1e-300):
        return np.array([0.0, 0.0, 1.0])
    nrm = evecs[:, 0]
    k = int(np.argmax(np.abs(nrm)))
    return nrm if nrm[k] > 0 else -nrm


def fit_surfel(points, normals, cube: OctreeCube, r_min: float) -> Surfel:
    """Centroid/mean-normal/max-radius surfel for the points of one cube.

    The radius is clamped to ``[r_min, sqrt(3)/2 b]``. A mean normal shorter
    than 1e-3 (cancelling input normals) is replaced by the smallest
    principal axis of the points.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    nrm = np.asarray(normals, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise PreconditionError("fit_surfel needs at least one point")
    center = pts.mean(axis=0)
    r = float(np.sqrt(((pts - center) ** 2).sum(axis=1)).max())
    mean_n = nrm.mean(axis=0)
    ln = np.linalg.norm(mean_n)
    normal = mean_n / ln if ln >= 1e-3 else _fallback_normal(pts)
    b = cube.width
    r = min(max(r, r_min), SQRT3_2 * b)
    return Surfel(center - cube.anchor, normal, r)


@dataclass
class _LevelFit:
    starts: np.ndarray   # group boundaries into the sorted point order
    codes: np.ndarray
    centers: np.ndarray
    normals: np.ndarray
    raw_radii: np.ndarray


def _fit_groups(pos_sorted: np.ndarray, nrm_sorted: np.ndarray, keys_sorted: np.ndarray) -> _LevelFit:
    boundary = np.flatnonzero(np.diff(keys_sorted)) + 1
    starts = np.concatenate([[0], boundary, [len(keys_sorted)]]).astype(np.int64)
    counts = np.diff(starts).astype(np.float64)
    first = starts[:-1]
    centers = np.add.reduceat(pos_sorted, first, axis=0) / counts[:, None]
    group_of = np.repeat(np.arange(len(first)), np.diff(starts))
    d2 = ((pos_sorted - centers[group_of]) ** 2).sum(axis=1)
    raw_r = np.sqrt(np.maximum.reduceat(d2, first))
    mean_n = np.add.reduceat(nrm_sorted, first, axis=0) / counts[:, None]
    ln = np.linalg.norm(mean_n, axis=1)
    normals = mean_n / np.where(ln >= 1e-3, ln, 1.0)[:, None]
    for g in np.flatnonzero(ln < 1e-3):
        normals[g] = _fallback_normal(pos_sorted[starts[g]:starts[g + 1]])
    return _LevelFit(starts, keys_sorted[first], centers, normals, raw_r)


# --------------------------------------------------------------------------- decision


@nb.njit(cache=True)
def _grid_d1_mse(pts, center, u, v, r, anchor, width, step, snap):
    """Symmetric point-to-point MSE between cube points and the sampled surfel."""
    if r <= 0.0:
        return 0.0
    G = max(2, 2 * int(math.ceil(r / step)))
    cell = 2.0 * r / G
    samples = np.empty((G * G, 3))
    ns = 0
    for i in range(G):
        a = -r + (i + 0.5) * cell
        for j in range(G):
            c = -r + (j + 0.5) * cell
            if a * a + c * c > r * r:
                continue
            inside = True
            q = np.empty(3)
            for k in range(3):
                q[k] = center[k] + u[k] * a + v[k] * c
                if q[k] < anchor[k] or q[k] >= anchor[k] + width:
                    inside = False
            if not inside:
                continue
            for k in range(3):
                if snap:
                    val = math.floor(q[k] + 0.5)
                    hi = anchor[k] + width - 1.0
                    if val > hi:
                        val = hi
                    if val < anchor[k]:
                        val = anchor[k]
                    samples[ns, k] = val
                else:
                    samples[ns, k] = q[k]
            ns += 1
    if ns == 0:
        for k in range(3):
            samples[0, k] = math.floor(center[k] + 0.5) if snap else center[k]
        ns = 1
    samples = samples[:ns]
    if snap:
        # drop duplicate voxels
        keys = np.empty(ns, np.int64)
        wi = int(width)
        for s in range(ns):
            keys[s] = (int(samples[s, 0] - anchor[0]) * wi + int(samples[s, 1] - anchor[1])) * wi + int(samples[s, 2] - anchor[2])
        order = np.argsort(keys)
        uniq = np.empty((ns, 3))
        nu = 0
        last = -1
        for t in range(ns):
            kk = keys[order[t]]
            if kk != last:
                uniq[nu] = samples[order[t]]
                nu += 1
                last = kk
        samples = uniq[:nu]
        ns = nu
    npts = pts.shape[0]
    acc_p = 0.0
    for p in range(npts):
        best = 1e300
        for s in range(ns):
            dx = pts[p, 0] - samples[s, 0]
            dy = pts[p, 1] - samples[s, 1]
            dz = pts[p, 2] - samples[s, 2]
            d = dx * dx + dy * dy + dz * dz
            if d < best:
                best = d
        acc_p += best
    acc_s = 0.0
    for s in range(ns):
        best = 1e300
        for p in range(npts):
            dx = pts[p, 0] - samples[s, 0]
            dy = pts[p, 1] - samples[s, 1]
            dz = pts[p, 2] - samples[s, 2]
            d = dx * dx + dy * dy + dz * dz
            if d < best:
                best = d
        acc_s += best
    return max(acc_p / npts, acc_s / ns)


@nb.njit(cache=True, parallel=True)
def _decide_kernel(pos_sorted, starts, centers, us, vs, radii, anchors, width, step, snap, out_mse):
    n = centers.shape[0]
    for g in nb.prange(n):
        pts = pos_sorted[starts[g]:starts[g + 1]]
        out_mse[g] = _grid_d1_mse(pts, centers[g], us[g], vs[g], radii[g], anchors[g], width, step, snap)


@nb.njit(cache=True)
def _samples_kernel(center, u, v, r, anchor, width, step, snap):
    # same sampling as _grid_d1_mse, exposed for whole-tree evaluation
    if r <= 0.0:
        out = np.empty((1, 3))
        for k in range(3):
            out[0, k] = center[k]
        return out
    G = max(2, 2 * int(math.ceil(r / step)))
    cell = 2.0 * r / G
    samples = np.empty((G * G, 3))
    ns = 0
    for i in range(G):
        a = -r + (i + 0.5) * cell
        for j in range(G):
            c = -r + (j + 0.5) * cell
            if a * a + c * c > r * r:
                continue
            inside = True
            q = np.empty(3)
            for k in range(3):
                q[k] = center[k] + u[k] * a + v[k] * c
                if q[k] < anchor[k] or q[k] >= anchor[k] + width:
                    inside = False
            if not inside:
                continue
            for k in range(3):
                val = q[k]
                if snap:
                    val = math.floor(val + 0.5)
                    val = min(max(val, anchor[k]), anchor[k] + width - 1.0)
                samples[ns, k] = val
            ns += 1
    if ns == 0:
        for k in range(3):
            samples[0, k] = math.floor(center[k] + 0.5) if snap else center[k]
        ns = 1
    return samples[:ns]


def psnr_from_mse(mse: float, peak: float) -> float:
    return math.inf if mse <= 0 else 10.0 * math.log10(peak * peak / mse)


def surfel_samples(surfel: Surfel, cube: OctreeCube, grid_step: float = 0.5, snap: bool = True,
                   raw_radius: float | None = None) -> np.ndarray:
    """Grid samples of a surfel inside its cube (deduplicated voxels when snapping)."""
    u, v = tangent_axes(surfel.normal)
    r = surfel.radius if raw_radius is None else raw_radius
    s = _samples_kernel(cube.anchor + surfel.offset, u[0], v[0], float(r), cube.anchor, cube.width, grid_step, snap)
    return np.unique(s, axis=0) if snap else s


def grid_d1_psnr(points, surfel: Surfel, cube: OctreeCube, peak: float, grid_step: float = 0.5,
                 snap: bool = True, raw_radius: float | None = None) -> float:
    pts = np.ascontiguousarray(np.asarray(points, dtype=np.float64).reshape(-1, 3))
    u, v = tangent_axes(surfel.normal)
    r = surfel.radius if raw_radius is None else raw_radius
    mse = _grid_d1_mse(pts, cube.anchor + surfel.offset, u[0], v[0], float(r), cube.anchor, cube.width, grid_step, snap)
    return psnr_from_mse(mse, peak)


def split_decision(points, surfel: Surfel, cube: OctreeCube, tau: float, grid_step: float = 0.5,
                   snap: bool = True, raw_radius: float | None = None) -> bool:
    """True when the surfel represents the cube's points (do not split).

    Compares a grid of samples on the surfel disk with the points by
    symmetric D1-PSNR against peak ``2**depth - 1``. ``raw_radius`` is the
    unclamped fitted radius; the grid covers that disk.
    """
    peak = float((1 << cube.depth) - 1)
    return grid_d1_psnr(points, surfel, cube, peak, grid_step, snap, raw_radius) >= tau


# --------------------------------------------------------------------------- build


def build_teso(cloud: PointCloud, config: BuildConfig | None = None, return_assignment: bool = False):
    """Build the surfel octree geometry (no texture patches).

    With ``return_assignment`` also returns, per input point, the flat leaf
    index (levels ascending, Morton order within a level) owning it.
    """
    config = config or BuildConfig.for_depth(cloud.depth)
    depth = cloud.depth
    levels = config.leaf_levels
    if levels[-1] > depth:
        raise PreconditionError(f"leaf level {levels[-1]} exceeds depth {depth}")
    sizes = config.sizes()
    if len(cloud) == 0:
        tree = SurfelOctree.empty(depth, levels, sizes)
        return (tree, np.zeros(0, np.int64)) if return_assignment else tree
    if cloud.normals is None:
        raise PreconditionError("build_teso needs point normals (run estimate_normals first)")

    sigma = float(1 << (depth - levels[-1]))
    r_min = sigma / 2.0
    peak = float((1 << depth) - 1)
    pos, nrm = cloud.positions, cloud.normals
    unvisited = np.arange(len(cloud))
    owner_level = np.full(len(cloud), -1, np.int64)
    owner_code = np.full(len(cloud), -1, np.int64)
    leaves: dict[int, LeafSet] = {}

    for level in levels:
        if unvisited.size == 0:
            leaves[level] = LeafSet.empty()
            continue
        w = float(1 << (depth - level))
        keys = morton_encode(np.floor(pos[unvisited] / w).astype(np.int64), level)
        order = np.argsort(keys, kind="stable")
        idx_sorted = unvisited[order]
        pos_s = np.ascontiguousarray(pos[idx_sorted])
        fit = _fit_groups(pos_s, nrm[idx_sorted], keys[order])
        n_groups = len(fit.codes)
        anchors = morton_decode(fit.codes, level).astype(np.float64) * w
        if level == levels[-1]:
            accept = np.ones(n_groups, bool)
        else:
            us, vs = tangent_axes(fit.normals)
            mse = np.empty(n_groups)
            _decide_kernel(pos_s, fit.starts, fit.centers, us, vs, fit.raw_radii, anchors, w,
                           float(config.grid_step), bool(config.snap_samples), mse)
            with np.errstate(divide="ignore"):
                psnr = np.where(mse > 0, 10.0 * np.log10(peak * peak / np.where(mse > 0, mse, 1.0)), np.inf)
            accept = psnr >= config.tau
        radii = np.clip(fit.raw_radii, r_min, SQRT3_2 * w)
        offsets = fit.centers - anchors
        leaves[level] = LeafSet(fit.codes[accept], offsets[accept], fit.normals[accept], radii[accept])
        counts = np.diff(fit.starts)
        point_accept = np.repeat(accept, counts)
        owner_level[idx_sorted[point_accept]] = level
        owner_code[idx_sorted[point_accept]] = np.repeat(fit.codes, counts)[point_accept]
        unvisited = np.sort(idx_sorted[~point_accept])

    tree = SurfelOctree.from_leaves(depth, levels, sizes, leaves)
    if not return_assignment:
        return tree
    flat_index = np.empty(len(cloud), np.int64)
    base = 0
    for level in levels:
        s = tree.leaf_set(level)
        sel = owner_level == level
        flat_index[sel] = base + np.searchsorted(s.codes, owner_code[sel])
        base += len(s)
    return tree, flat_index


def tree_grid_samples(tree: SurfelOctree, grid_step: float = 0.5, snap: bool = True) -> np.ndarray:
    """Union of the decision-grid samples of every leaf surfel (stored radii)."""
    flat = tree.flat()
    if len(flat) == 0:
        return np.zeros((0, 3))
    us, vs = tangent_axes(flat.normals)
    parts = [
        _samples_kernel(flat.centers[i], us[i], vs[i], float(flat.radii[i]), flat.anchors[i], float(flat.widths[i]),
                        grid_step, snap)
        for i in range(len(flat))
    ]
    out = np.concatenate(parts)
    return np.unique(out, axis=0) if snap else out
