"""Scalar quantization of surfel offsets and radii, octahedral quantization of normals."""

from __future__ import annotations

import dataclasses
import math

import numpy as np

from .core.types import SQRT3_2, LeafSet, PreconditionError, SurfelOctree

OFFSET_STEP = 0.5
NORMAL_STEP = 1.0 / 64.0
RADIUS_STEP = 1.0 / 16.0


def _sgn(x):
    # Sgn(0) = +1 so axis-aligned normals with n_z < 0 fold deterministically
    return np.where(x >= 0, 1.0, -1.0)


def offset_alphabet(width: float, step: float = OFFSET_STEP) -> int:
    return int(round(width / step))


def normal_alphabet(step: float = NORMAL_STEP) -> int:
    return int(round(2.0 / step)) + 1


def radius_alphabet(width: float, step: float = RADIUS_STEP) -> int:
    return int(math.ceil(SQRT3_2 * width / step)) + 1


def alphabet_sizes(level: int, depth: int) -> dict[str, int]:
    """Per-level symbol counts for offset, normal and radius indices."""
    b = float(1 << (depth - level))
    return {"offset": offset_alphabet(b), "normal": normal_alphabet(), "radius": radius_alphabet(b)}


def quantize_offset(offset, width: float, step: float = OFFSET_STEP) -> np.ndarray:
    o = np.asarray(offset, dtype=np.float64)
    if np.any(o < 0) or np.any(o >= width):
        raise PreconditionError(f"offset outside [0, {width})")
    return np.floor(o / step).astype(np.int64)


def dequantize_offset(index, step: float = OFFSET_STEP) -> np.ndarray:
    return (np.asarray(index, dtype=np.float64) + 0.5) * step


def oct_encode(normal) -> np.ndarray:
    """Octahedral projection of unit vectors to ``(u, v)`` in ``[-1, 1]**2``."""
    n = np.asarray(normal, dtype=np.float64)
    l1 = np.abs(n).sum(axis=-1)
    px = n[..., 0] / l1
    py = n[..., 1] / l1
    neg = n[..., 2] < 0
    u = np.where(neg, (1.0 - np.abs(py)) * _sgn(px), px)
    v = np.where(neg, (1.0 - np.abs(px)) * _sgn(py), py)
    return np.stack([u, v], axis=-1)


def oct_decode(uv) -> np.ndarray:
    uv = np.asarray(uv, dtype=np.float64)
    u, v = uv[..., 0], uv[..., 1]
    z = 1.0 - np.abs(u) - np.abs(v)
    neg = z < 0
    x = np.where(neg, (1.0 - np.abs(v)) * _sgn(u), u)
    y = np.where(neg, (1.0 - np.abs(u)) * _sgn(v), v)
    n = np.stack([x, y, z], axis=-1)
    return n / np.linalg.norm(n, axis=-1, keepdims=True)


def quantize_normal(uv, step: float = NORMAL_STEP) -> np.ndarray:
    idx = np.floor((np.asarray(uv, dtype=np.float64) + 1.0) / step + 0.5).astype(np.int64)
    return np.clip(idx, 0, normal_alphabet(step) - 1)


def dequantize_normal(index, step: float = NORMAL_STEP) -> np.ndarray:
    return np.asarray(index, dtype=np.float64) * step - 1.0


def quantize_unit_normal(normal, step: float = NORMAL_STEP) -> np.ndarray:
    """Lattice indices of unit normals, minimising the decoded angular error.

    Chooses among the four lattice points around the octahedral projection
    (floor/ceil per axis) the one whose decoded normal is closest; plain
    rounding of ``(u, v)`` exceeds 1.5 degrees near the octahedron's fold.
    """
    n = np.asarray(normal, dtype=np.float64).reshape(-1, 3)
    top = normal_alphabet(step) - 1
    base = np.floor((oct_encode(n) + 1.0) / step).astype(np.int64)
    best = np.clip(base, 0, top)
    best_dot = np.einsum("ij,ij->i", oct_decode(dequantize_normal(best, step)), n)
    for dx, dy in ((1, 0), (0, 1), (1, 1)):
        cand = np.clip(base + np.array([dx, dy]), 0, top)
        dot = np.einsum("ij,ij->i", oct_decode(dequantize_normal(cand, step)), n)
        better = dot > best_dot
        best[better] = cand[better]
        best_dot[better] = dot[better]
    return canonical_normal_index(best, top)


def canonical_normal_index(idx, top: int = 128) -> np.ndarray:
    """Pick one index among lattice points that decode to the same normal.

    On the square's border ``|u| = 1`` the decoded normal ignores the sign
    of ``v`` (and vice versa); the non-negative one is kept, which is what
    :func:`oct_encode` produces for such normals.
    """
    idx = np.array(idx, dtype=np.int64, copy=True)
    iu, iv = idx[..., 0], idx[..., 1]
    edge_u = (iu == 0) | (iu == top)
    iv[edge_u] = np.maximum(iv[edge_u], top - iv[edge_u])
    edge_v = (iv == 0) | (iv == top)
    iu[edge_v] = np.maximum(iu[edge_v], top - iu[edge_v])
    return idx


def quantize_radius(radius, width: float, step: float = RADIUS_STEP) -> np.ndarray:
    r = np.asarray(radius, dtype=np.float64)
    if np.any(r <= 0):
        raise PreconditionError("radius must be positive")
    idx = np.floor(r / step).astype(np.int64)
    return np.clip(idx, 0, radius_alphabet(width, step) - 1)


def dequantize_radius(index, step: float = RADIUS_STEP) -> np.ndarray:
    return (np.asarray(index, dtype=np.float64) + 0.5) * step


def quantize_leaves(leaves: LeafSet, width: float) -> LeafSet:
    qo = quantize_offset(leaves.offsets, width)
    qn = quantize_unit_normal(leaves.normals)
    qr = quantize_radius(leaves.radii, width)
    return dequantized_leaves(leaves.codes, qo, qn, qr, patches=leaves.patches)


def dequantized_leaves(codes, q_offset, q_normal, q_radius, patches=None) -> LeafSet:
    q_offset = np.asarray(q_offset, dtype=np.int64).reshape(-1, 3)
    q_normal = np.asarray(q_normal, dtype=np.int64).reshape(-1, 2)
    q_radius = np.asarray(q_radius, dtype=np.int64).reshape(-1)
    normals = oct_decode(dequantize_normal(q_normal)) if len(q_normal) else np.zeros((0, 3))
    return LeafSet(
        codes=codes,
        offsets=dequantize_offset(q_offset),
        normals=normals,
        radii=dequantize_radius(q_radius),
        patches=patches,
        q_offset=q_offset,
        q_normal=q_normal,
        q_radius=q_radius,
    )


def quantize_tree(tree: SurfelOctree) -> SurfelOctree:
    """Replace every leaf attribute by its quantized reconstruction.

    Patches are dropped: they must be resampled from the quantized geometry.
    """
    new = {}
    for level in tree.leaf_levels:
        s = dataclasses.replace(tree.leaf_set(level), patches=None)
        new[level] = quantize_leaves(s, tree.width(level))
    return tree.with_leaves(new)
