"""Morton (z-order) indexing of octree nodes and 2D slot grids.

Child digits are x-major: ``(x_bit << 2) | (y_bit << 1) | z_bit``, with the
most significant level first. Codes up to level 21 fit in a signed int64.
"""

from __future__ import annotations

import numpy as np

MAX_LEVEL = 21

_SPREAD3_MASKS = (
    (32, 0x1F00000000FFFF),
    (16, 0x1F0000FF0000FF),
    (8, 0x100F00F00F00F00F),
    (4, 0x10C30C30C30C30C3),
    (2, 0x1249249249249249),
)


def _spread3(v: np.ndarray) -> np.ndarray:
    v = v.astype(np.uint64) & np.uint64(0x1FFFFF)
    for shift, mask in _SPREAD3_MASKS:
        v = (v | (v << np.uint64(shift))) & np.uint64(mask)
    return v


_COMPACT3_MASKS = (
    (2, 0x10C30C30C30C30C3),
    (4, 0x100F00F00F00F00F),
    (8, 0x1F0000FF0000FF),
    (16, 0x1F00000000FFFF),
    (32, 0x1FFFFF),
)


def _compact3(v: np.ndarray) -> np.ndarray:
    v = v.astype(np.uint64) & np.uint64(0x1249249249249249)
    for shift, mask in _COMPACT3_MASKS:
        v = (v | (v >> np.uint64(shift))) & np.uint64(mask)
    return v


def _check_level(level: int) -> None:
    if not 0 <= level <= MAX_LEVEL:
        raise ValueError(f"level {level} outside [0, {MAX_LEVEL}]")


def morton_encode(coords, level: int):
    """Interleave integer node coordinates into a Morton index.

    ``coords`` is a triple or an ``(n, 3)`` array; returns an int or an int64
    array accordingly. Raises ``ValueError`` for coordinates outside
    ``[0, 2**level)``.
    """
    _check_level(level)
    arr = np.asarray(coords)
    scalar = arr.ndim == 1
    arr = np.atleast_2d(arr)
    if arr.shape[-1] != 3:
        raise ValueError("coords must have 3 components")
    if not np.issubdtype(arr.dtype, np.integer):
        if not np.all(np.floor(arr) == arr):
            raise ValueError("coords must be integers")
        arr = arr.astype(np.int64)
    if arr.size and (arr.min() < 0 or arr.max() >= (1 << level)):
        raise ValueError(f"coords out of range for level {level}")
    code = (_spread3(arr[:, 0]) << np.uint64(2)) | (_spread3(arr[:, 1]) << np.uint64(1)) | _spread3(arr[:, 2])
    code = code.astype(np.int64)
    return int(code[0]) if scalar else code


def morton_decode(index, level: int):
    """Inverse of :func:`morton_encode`."""
    _check_level(level)
    arr = np.asarray(index, dtype=np.int64)
    scalar = arr.ndim == 0
    arr = np.atleast_1d(arr)
    if arr.size and (arr.min() < 0 or arr.max() >= (1 << (3 * level))):
        raise ValueError(f"index out of range for level {level}")
    u = arr.astype(np.uint64)
    out = np.stack(
        [_compact3(u >> np.uint64(2)), _compact3(u >> np.uint64(1)), _compact3(u)], axis=-1
    ).astype(np.int64)
    return tuple(int(c) for c in out[0]) if scalar else out


def neighbor_codes(codes: np.ndarray, level: int, offsets: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Morton codes of ``codes`` displaced by each row of ``offsets``.

    Returns ``(neighbors, valid)`` of shape ``(n, len(offsets))``; entries that
    fall outside the grid are flagged invalid and set to -1.
    """
    coords = morton_decode(np.asarray(codes, dtype=np.int64), level)
    moved = coords[:, None, :] + np.asarray(offsets, dtype=np.int64)[None, :, :]
    valid = np.all((moved >= 0) & (moved < (1 << level)), axis=-1)
    clipped = np.clip(moved, 0, (1 << level) - 1).reshape(-1, 3)
    nb = morton_encode(clipped, level).reshape(valid.shape)
    return np.where(valid, nb, -1), valid


FACE_OFFSETS = np.array(
    [[-1, 0, 0], [1, 0, 0], [0, -1, 0], [0, 1, 0], [0, 0, -1], [0, 0, 1]], dtype=np.int64
)
CUBE27_OFFSETS = np.array(
    [[dx, dy, dz] for dx in (-1, 0, 1) for dy in (-1, 0, 1) for dz in (-1, 0, 1)], dtype=np.int64
)


def count_present(candidates: np.ndarray, valid: np.ndarray, sorted_set: np.ndarray) -> np.ndarray:
    """Per row, how many valid candidate codes are members of ``sorted_set``."""
    if sorted_set.size == 0 or candidates.size == 0:
        return np.zeros(candidates.shape[0], dtype=np.int64)
    pos = np.searchsorted(sorted_set, candidates)
    pos = np.minimum(pos, sorted_set.size - 1)
    hit = valid & (sorted_set[pos] == candidates)
    return hit.sum(axis=1).astype(np.int64)


def slot_position(slot, grid_bits: int | None = None):
    """Map a 2D Morton slot index to ``(col, row)``.

    Bit ``2k`` of the slot feeds bit ``k`` of the column and bit ``2k+1``
    feeds the row, so slot 1 is to the right of slot 0 and slot 2 below it.
    """
    s = np.asarray(slot, dtype=np.int64)
    col = np.zeros_like(s)
    row = np.zeros_like(s)
    nbits = grid_bits if grid_bits is not None else 32
    for k in range(nbits):
        col |= ((s >> (2 * k)) & 1) << k
        row |= ((s >> (2 * k + 1)) & 1) << k
    if s.ndim == 0:
        return int(col), int(row)
    return col, row


def slot_index(col, row, grid_bits: int = 32):
    """Inverse of :func:`slot_position`."""
    c = np.asarray(col, dtype=np.int64)
    r = np.asarray(row, dtype=np.int64)
    s = np.zeros(np.broadcast(c, r).shape, dtype=np.int64)
    for k in range(grid_bits):
        s |= ((c >> k) & 1) << (2 * k)
        s |= ((r >> k) & 1) << (2 * k + 1)
    return int(s) if s.ndim == 0 else s
