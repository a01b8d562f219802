"""CPU ray caster for textured surfel octrees.

World units are voxels. Each pixel casts one ray through its center and
walks the surfels of its 16x16 tile, nearest surfel center first. Soft hits
(outside the bounding cube, within ``3 sigma`` of it) blend with
``alpha = exp(-d**2 / sigma**2)``; the first solid hit terminates the ray.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numba as nb
import numpy as np

from .core.types import OctreeCube, PreconditionError, Surfel, SurfelOctree
from .texture import tangent_axes

TILE = 16
SOFT_SIGMAS = 3.0
VOXELS_PER_METER = 1024 / 1.8

MISS, SOLID, SOFT = 0, 1, 2
_KIND_NAMES = {MISS: "miss", SOLID: "solid", SOFT: "soft"}


# --------------------------------------------------------------------------- camera


@dataclass(frozen=True)
class Camera:
    position: np.ndarray
    look_at: np.ndarray
    up: np.ndarray = (0.0, 1.0, 0.0)
    fov: float = 45.0
    width: int = 1024
    height: int = 1024

    def __post_init__(self):
        pos = np.asarray(self.position, dtype=np.float64).reshape(3)
        tgt = np.asarray(self.look_at, dtype=np.float64).reshape(3)
        up = np.asarray(self.up, dtype=np.float64).reshape(3)
        if not 0.0 < self.fov < 180.0:
            raise PreconditionError(f"fov {self.fov} outside (0, 180)")
        if np.allclose(pos, tgt):
            raise PreconditionError("look-at point equals the camera position")
        if self.width < 1 or self.height < 1:
            raise PreconditionError("image size must be positive")
        fwd = tgt - pos
        if np.linalg.norm(np.cross(fwd, up)) < 1e-12 * np.linalg.norm(fwd) * max(np.linalg.norm(up), 1e-300):
            raise PreconditionError("up vector parallel to the viewing direction")
        object.__setattr__(self, "position", pos)
        object.__setattr__(self, "look_at", tgt)
        object.__setattr__(self, "up", up)
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))

    @property
    def focal(self) -> float:
        """Focal length in pixels (vertical field of view)."""
        return 0.5 * self.height / math.tan(math.radians(self.fov) / 2.0)

    def basis(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Right, up and forward unit vectors."""
        f = self.look_at - self.position
        f /= np.linalg.norm(f)
        r = np.cross(f, self.up)
        r /= np.linalg.norm(r)
        u = np.cross(r, f)
        return r, u, f

    def with_resolution(self, width: int, height: int | None = None) -> "Camera":
        return Camera(self.position, self.look_at, self.up, self.fov, width, width if height is None else height)

    def ray(self, col: float, row: float) -> tuple[np.ndarray, np.ndarray]:
        """Origin and unit direction through pixel coordinates (pixel centers at +0.5)."""
        r, u, f = self.basis()
        x = (col - 0.5 * self.width) / self.focal
        y = -(row - 0.5 * self.height) / self.focal
        d = f + x * r + y * u
        return self.position.copy(), d / np.linalg.norm(d)


def make_trajectory(n_frames: int, radius: float = 2.75, fov: float = 45.0, perturb: float = 1.0,
                    center=(512.0, 512.0, 512.0), seed: int = 0, scale: float = VOXELS_PER_METER,
                    width: int = 1024, height: int = 1024) -> list[Camera]:
    """Cameras on a horizontal (xz) circle around ``center``, looking at it.

    Distances are in meters (``scale`` voxels per meter); frame ``i`` sits at
    angle ``2 pi i / n`` and distance ``radius + s_i`` with ``s_i`` drawn
    uniformly from ``[-perturb, perturb]`` by a generator seeded with ``seed``.
    Frame 0 looks along -z.
    """
    if n_frames < 1:
        raise PreconditionError("n_frames must be >= 1")
    if perturb >= radius:
        raise PreconditionError("perturbation must be smaller than the radius")
    c = np.asarray(center, dtype=np.float64)
    rng = np.random.default_rng(seed)
    s = rng.uniform(-perturb, perturb, size=n_frames) if perturb > 0 else np.zeros(n_frames)
    cams = []
    for i in range(n_frames):
        th = 2.0 * math.pi * i / n_frames
        d = (radius + s[i]) * scale
        pos = c + d * np.array([math.sin(th), 0.0, math.cos(th)])
        cams.append(Camera(pos, c, np.array([0.0, 1.0, 0.0]), fov, width, height))
    return cams


def write_trajectory(cameras: list[Camera], path) -> None:
    """Text format: ``index px py pz lx ly lz ux uy uz fov`` per line."""
    lines = ["# index position(3) look_at(3) up(3) fov_deg"]
    for i, cam in enumerate(cameras):
        vals = [*cam.position, *cam.look_at, *cam.up, cam.fov]
        lines.append(f"{i} " + " ".join(repr(float(v)) for v in vals))
    Path(path).write_text("\n".join(lines) + "\n")


def read_trajectory(path, width: int = 1024, height: int | None = None) -> list[Camera]:
    cams = []
    for ln, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 11:
            raise ValueError(f"{path}:{ln}: expected 11 fields, got {len(parts)}")
        v = [float(p) for p in parts[1:]]
        cams.append(Camera(np.array(v[0:3]), np.array(v[3:6]), np.array(v[6:9]), v[9], width,
                           width if height is None else height))
    return cams


# --------------------------------------------------------------------------- intersection and shading


@nb.njit(cache=True)
def _intersect(o0, o1, o2, d0, d1, d2, P, n, u, v, r, A, b, sigma, soft):
    """Returns (kind, t, hx, hy, hz, s, tp, alpha)."""
    den = n[0] * d0 + n[1] * d1 + n[2] * d2
    if abs(den) < 1e-9:
        return MISS, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0
    t = (n[0] * (P[0] - o0) + n[1] * (P[1] - o1) + n[2] * (P[2] - o2)) / den
    if t <= 0.0:
        return MISS, t, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0
    hx = o0 + t * d0
    hy = o1 + t * d1
    hz = o2 + t * d2
    ex = hx - P[0]
    ey = hy - P[1]
    ez = hz - P[2]
    dp = math.sqrt(ex * ex + ey * ey + ez * ez)
    gx = max(A[0] - hx, 0.0, hx - (A[0] + b))
    gy = max(A[1] - hy, 0.0, hy - (A[1] + b))
    gz = max(A[2] - hz, 0.0, hz - (A[2] + b))
    dbox = math.sqrt(gx * gx + gy * gy + gz * gz)
    s = ((u[0] * ex + u[1] * ey + u[2] * ez) + r) / (2.0 * r)
    tp = ((v[0] * ex + v[1] * ey + v[2] * ez) + r) / (2.0 * r)
    if dbox == 0.0:
        if dp <= r:
            return SOLID, t, hx, hy, hz, s, tp, 1.0
        return MISS, t, hx, hy, hz, s, tp, 0.0
    if dbox <= soft and dp <= r + soft:
        return SOFT, t, hx, hy, hz, s, tp, math.exp(-(dbox * dbox) / (sigma * sigma))
    return MISS, t, hx, hy, hz, s, tp, 0.0


@nb.njit(cache=True)
def _shade(pix, off, M, s, tp):
    # bilinear over pixel centers; pix rows are v (tp), columns u (s)
    x = s * M - 0.5
    y = tp * M - 0.5
    if x < 0.0:
        x = 0.0
    if y < 0.0:
        y = 0.0
    if x > M - 1:
        x = M - 1.0
    if y > M - 1:
        y = M - 1.0
    i0 = int(math.floor(x))
    j0 = int(math.floor(y))
    i1 = min(i0 + 1, M - 1)
    j1 = min(j0 + 1, M - 1)
    fx = x - i0
    fy = y - j0
    out = np.empty(3)
    for c in range(3):
        p00 = pix[off + j0 * M + i0, c]
        p01 = pix[off + j0 * M + i1, c]
        p10 = pix[off + j1 * M + i0, c]
        p11 = pix[off + j1 * M + i1, c]
        out[c] = (1 - fy) * ((1 - fx) * p00 + fx * p01) + fy * ((1 - fx) * p10 + fx * p11)
    return out


@dataclass(frozen=True)
class HitRecord:
    kind: str
    t: float
    point: np.ndarray
    patch_coords: tuple[float, float]
    alpha: float


def intersect(origin, direction, surfel: Surfel, cube: OctreeCube, sigma: float,
              soft_extent: float | None = None) -> HitRecord:
    """Classify the ray ``origin + t direction`` against one bounded surfel."""
    d = np.asarray(direction, dtype=np.float64)
    if abs(np.linalg.norm(d) - 1.0) > 1e-9:
        raise PreconditionError("ray direction must be unit length")
    o = np.asarray(origin, dtype=np.float64)
    P = cube.anchor + np.asarray(surfel.offset, dtype=np.float64)
    n = np.asarray(surfel.normal, dtype=np.float64)
    u, v = tangent_axes(n)
    soft = SOFT_SIGMAS * sigma if soft_extent is None else soft_extent
    kind, t, hx, hy, hz, s, tp, a = _intersect(o[0], o[1], o[2], d[0], d[1], d[2], P, n, u[0], v[0],
                                               float(surfel.radius), cube.anchor, cube.width, float(sigma), float(soft))
    return HitRecord(_KIND_NAMES[kind], t, np.array([hx, hy, hz]), (s, tp), a)


def shade(patch, s: float, t: float) -> np.ndarray:
    """Bilinear color of an ``M x M x 3`` patch at patch coordinates ``(s, t)``."""
    p = np.ascontiguousarray(np.asarray(patch, dtype=np.float64))
    M = p.shape[0]
    return _shade(p.reshape(-1, 3), 0, M, float(s), float(t))


# --------------------------------------------------------------------------- scene packing


@dataclass(frozen=True)
class Scene:
    """Flat render arrays; surfels in canonical order (levels ascending, Morton)."""

    centers: np.ndarray
    normals: np.ndarray
    us: np.ndarray
    vs: np.ndarray
    radii: np.ndarray
    anchors: np.ndarray
    widths: np.ndarray
    pixels: np.ndarray
    patch_offset: np.ndarray
    patch_size: np.ndarray
    sigma: float

    def __len__(self):
        return self.centers.shape[0]


def prepare_scene(tree: SurfelOctree) -> Scene:
    if tree.n_leaves and not tree.has_patches:
        raise PreconditionError("render needs texture patches on every leaf")
    flat = tree.flat()
    pix, offs, sizes = [], [], []
    off = 0
    for level in tree.leaf_levels:
        s = tree.leaf_set(level)
        if not len(s):
            continue
        M = s.patches.shape[1]
        pix.append(s.patches.reshape(-1, 3))
        offs.append(off + np.arange(len(s)) * M * M)
        sizes.append(np.full(len(s), M, np.int64))
        off += len(s) * M * M
    if flat.centers.shape[0]:
        us, vs = tangent_axes(flat.normals)
        pixels = np.ascontiguousarray(np.concatenate(pix))
        patch_offset = np.concatenate(offs).astype(np.int64)
        patch_size = np.concatenate(sizes)
    else:
        us = vs = np.zeros((0, 3))
        pixels = np.zeros((0, 3))
        patch_offset = patch_size = np.zeros(0, np.int64)
    c = np.ascontiguousarray
    return Scene(c(flat.centers), c(flat.normals), c(us), c(vs), c(flat.radii), c(flat.anchors),
                 c(flat.widths), pixels, patch_offset, patch_size, tree.sigma)


@nb.njit(cache=True)
def _bin_tiles(order, centers, reach, pos, right, up, fwd, focal, W, H, nx, ny):
    """CSR per-tile surfel lists, in ``order``."""
    n = order.shape[0]
    x0 = np.empty(n, np.int64)
    x1 = np.empty(n, np.int64)
    y0 = np.empty(n, np.int64)
    y1 = np.empty(n, np.int64)
    counts = np.zeros(nx * ny + 1, np.int64)
    for k in range(n):
        i = order[k]
        R = reach[i]
        xmin = 1e300
        xmax = -1e300
        ymin = 1e300
        ymax = -1e300
        behind = False
        for cx in (-1.0, 1.0):
            for cy in (-1.0, 1.0):
                for cz in (-1.0, 1.0):
                    px = centers[i, 0] + cx * R - pos[0]
                    py = centers[i, 1] + cy * R - pos[1]
                    pz = centers[i, 2] + cz * R - pos[2]
                    z = px * fwd[0] + py * fwd[1] + pz * fwd[2]
                    if z <= 1e-6:
                        behind = True
                        continue
                    sx = 0.5 * W + focal * (px * right[0] + py * right[1] + pz * right[2]) / z
                    sy = 0.5 * H - focal * (px * up[0] + py * up[1] + pz * up[2]) / z
                    xmin = min(xmin, sx)
                    xmax = max(xmax, sx)
                    ymin = min(ymin, sy)
                    ymax = max(ymax, sy)
        if behind:
            x0[k], x1[k], y0[k], y1[k] = 0, nx - 1, 0, ny - 1
        else:
            xmin = min(max(xmin, -1.0), W + 1.0)
            xmax = min(max(xmax, -1.0), W + 1.0)
            ymin = min(max(ymin, -1.0), H + 1.0)
            ymax = min(max(ymax, -1.0), H + 1.0)
            x0[k] = max(0, int(math.floor(xmin)) // 16)
            x1[k] = min(nx - 1, int(math.floor(xmax)) // 16)
            y0[k] = max(0, int(math.floor(ymin)) // 16)
            y1[k] = min(ny - 1, int(math.floor(ymax)) // 16)
            if xmax < 0 or ymax < 0 or xmin >= W or ymin >= H:
                x1[k] = -1
        for ty in range(y0[k], y1[k] + 1):
            for tx in range(x0[k], x1[k] + 1):
                counts[ty * nx + tx + 1] += 1
    for t in range(nx * ny):
        counts[t + 1] += counts[t]
    fill = counts[:-1].copy()
    items = np.empty(counts[nx * ny], np.int64)
    for k in range(n):
        for ty in range(y0[k], y1[k] + 1):
            for tx in range(x0[k], x1[k] + 1):
                t = ty * nx + tx
                items[fill[t]] = order[k]
                fill[t] += 1
    return counts, items


@nb.njit(cache=True, parallel=True)
def _render_kernel(img, start, items, pos, right, up, fwd, focal, W, H, nx, centers, normals, us, vs, radii,
                   anchors, widths, pixels, poff, psize, sigma, soft, bg):
    n_tiles = start.shape[0] - 1
    for tile in nb.prange(n_tiles):
        tx = tile % nx
        ty = tile // nx
        a = start[tile]
        e = start[tile + 1]
        for row in range(ty * 16, min(ty * 16 + 16, H)):
            for col in range(tx * 16, min(tx * 16 + 16, W)):
                x = (col + 0.5 - 0.5 * W) / focal
                y = -(row + 0.5 - 0.5 * H) / focal
                d0 = fwd[0] + x * right[0] + y * up[0]
                d1 = fwd[1] + x * right[1] + y * up[1]
                d2 = fwd[2] + x * right[2] + y * up[2]
                dn = math.sqrt(d0 * d0 + d1 * d1 + d2 * d2)
                d0 /= dn
                d1 /= dn
                d2 /= dn
                T = 1.0
                c0 = 0.0
                c1 = 0.0
                c2 = 0.0
                solid = False
                for k in range(a, e):
                    i = items[k]
                    kind, t, hx, hy, hz, s, tp, alpha = _intersect(
                        pos[0], pos[1], pos[2], d0, d1, d2, centers[i], normals[i], us[i], vs[i], radii[i],
                        anchors[i], widths[i], sigma, soft)
                    if kind == MISS:
                        continue
                    s = min(max(s, 0.0), 1.0)
                    tp = min(max(tp, 0.0), 1.0)
                    col3 = _shade(pixels, poff[i], psize[i], s, tp)
                    if kind == SOLID:
                        c0 += T * col3[0]
                        c1 += T * col3[1]
                        c2 += T * col3[2]
                        solid = True
                        break
                    c0 += T * alpha * col3[0]
                    c1 += T * alpha * col3[1]
                    c2 += T * alpha * col3[2]
                    T *= 1.0 - alpha
                if not solid:
                    c0 += T * bg[0]
                    c1 += T * bg[1]
                    c2 += T * bg[2]
                img[row, col, 0] = min(max(c0, 0.0), 1.0)
                img[row, col, 1] = min(max(c1, 0.0), 1.0)
                img[row, col, 2] = min(max(c2, 0.0), 1.0)


def draw_order(scene: Scene, camera: Camera) -> np.ndarray:
    """Surfel indices by camera-to-center distance, ties by canonical index."""
    n = len(scene)
    dist = np.linalg.norm(scene.centers - camera.position, axis=1)
    return np.lexsort((np.arange(n), dist)).astype(np.int64)


def render(tree: SurfelOctree | Scene, camera: Camera, background=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Float RGB image ``(height, width, 3)`` in [0, 1]."""
    scene = tree if isinstance(tree, Scene) else prepare_scene(tree)
    W, H = camera.width, camera.height
    bg = np.asarray(background, dtype=np.float64).reshape(3)
    img = np.empty((H, W, 3))
    if len(scene) == 0:
        img[:] = bg
        return img
    right, up, fwd = camera.basis()
    soft = SOFT_SIGMAS * scene.sigma
    reach = scene.radii + soft
    nx, ny = (W + TILE - 1) // TILE, (H + TILE - 1) // TILE
    order = draw_order(scene, camera)
    start, items = _bin_tiles(order, scene.centers, reach, camera.position, right, up, fwd, camera.focal, W, H, nx, ny)
    _render_kernel(img, start, items, camera.position, right, up, fwd, camera.focal, W, H, nx, scene.centers,
                   scene.normals, scene.us, scene.vs, scene.radii, scene.anchors, scene.widths, scene.pixels,
                   scene.patch_offset, scene.patch_size, scene.sigma, soft, bg)
    return img


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)


def save_png(image: np.ndarray, path) -> None:
    from PIL import Image

    Image.fromarray(to_uint8(image), mode="RGB").save(path)
