"""Lossless coding of quantized surfel octree geometry.

Section layout (one range-coded stream each, ids ``kind << 8 | level``):

* base: a mode byte, then the 8-bit child patterns of every node above
  ``l_min``, breadth first;
* occupancy, ``l_min < l <= l_max``: one bit per child of every split node
  at ``l - 1``;
* leaf flags, ``l_min <= l < l_max``: one bit per occupied node;
* attributes, each leaf level: three streams (offset, normal, radius
  indices) behind two u32 length prefixes.

Decoding interleaves the sections level by level because occupancy and
attribute contexts depend on the surfels of coarser leaves.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from ..core.container import (
    SECTION_ATTRIBUTES,
    SECTION_BASE,
    SECTION_FLAGS,
    SECTION_OCCUPANCY,
    BitstreamHeader,
    FormatError,
    section_id,
)
from ..core.morton import FACE_OFFSETS, count_present, morton_decode, neighbor_codes
from ..core.types import LeafSet, PreconditionError, SurfelOctree
from ..quant import (
    NORMAL_STEP,
    OFFSET_STEP,
    RADIUS_STEP,
    dequantized_leaves,
    normal_alphabet,
    offset_alphabet,
    radius_alphabet,
)
from . import context as ctxmod
from .rangecoder import AdaptiveModel, RangeDecoder, RangeEncoder, StreamError

ATTR_MODES = ("none", "offset", "offset_normal")
MAX_ALPHABET = 4096
_NB_BUCKETS = 4
_LEN2 = struct.Struct("<II")


@dataclass(frozen=True)
class GeometryCodecConfig:
    """Context choices; ``attr_context`` and ``occupancy_context`` are ablations."""

    attr_context: str = "offset_normal"
    occupancy_context: bool = True

    def __post_init__(self):
        if self.attr_context not in ATTR_MODES:
            raise PreconditionError(f"attr_context must be one of {ATTR_MODES}")

    def mode_byte(self, nonempty: bool) -> int:
        return ATTR_MODES.index(self.attr_context) | (int(self.occupancy_context) << 2) | (int(nonempty) << 7)

    @classmethod
    def from_byte(cls, b: int) -> tuple["GeometryCodecConfig", bool]:
        mode = b & 0x3
        if mode >= len(ATTR_MODES) or b & 0x78:
            raise FormatError(f"bad geometry mode byte {b:#04x}")
        return cls(ATTR_MODES[mode], bool(b & 0x4)), bool(b & 0x80)


# --------------------------------------------------------------------------- contexts


def face_neighbor_count(codes, level: int, present_sorted) -> np.ndarray:
    nb, valid = neighbor_codes(np.asarray(codes, dtype=np.int64), level, FACE_OFFSETS)
    return count_present(nb, valid, np.asarray(present_sorted, dtype=np.int64))


def _bucket(idx, alphabet):
    return (np.asarray(idx, dtype=np.int64) * 4) // alphabet


def center_distance_bucket(q_offset, width: int) -> np.ndarray:
    """0..3: distance of the dequantized offset from the cube center, in steps of ``sqrt(3) b / 12``.

    Exact integer test: with ``D = sum (2 q + 1 - 2 b)^2`` (16x the squared
    distance), bucket ``k`` is reached when ``3 D >= k^2 b^2``.
    """
    q = np.asarray(q_offset, dtype=np.int64).reshape(-1, 3)
    D = ((2 * q + 1 - 2 * int(width)) ** 2).sum(axis=1)
    bb = int(width) ** 2
    return (3 * D >= bb).astype(np.int64) + (3 * D >= 4 * bb) + (3 * D >= 9 * bb)


def axis_alignment_bucket(q_normal) -> np.ndarray:
    """0..3: how close a quantized normal is to a coordinate axis.

    Uses the L1-normalized magnitudes ``A`` (summing to 64) implied by the
    octahedral lattice indices; ``max A`` spans [22, 64].
    """
    q = np.asarray(q_normal, dtype=np.int64).reshape(-1, 2)
    U = np.abs(q[:, 0] - 64)
    V = np.abs(q[:, 1] - 64)
    upper = U + V <= 64
    m = np.where(upper, np.maximum(np.maximum(U, V), 64 - U - V),
                 np.maximum(np.maximum(64 - V, 64 - U), U + V - 64))
    return np.minimum((3 * m - 64) * 4 // 128, 3)


def attribute_contexts(level: int, depth: int, vcount, q_offset, q_normal, mode: str):
    """Context indices for the offset, normal and radius passes.

    Offsets see only the virtual-neighbor bucket. Normals add a 2-bit bucket
    per offset component. The radius depends on the surfel's distance from
    the cube center and on its tilt, not on signs, so its offset and normal
    inputs are folded: center-distance bucket and axis-alignment bucket.

    Returns ``(ctx_offset[n, 3], ctx_normal[n, 2], ctx_radius[n])`` and the
    number of contexts per component model.
    """
    b = 1 << (depth - level)
    ka = offset_alphabet(float(b))
    vb = np.minimum(np.asarray(vcount, dtype=np.int64), _NB_BUCKETS - 1)
    n = vb.size
    ctx_o = np.arange(3)[None, :] * _NB_BUCKETS + vb[:, None]
    if mode == "none":
        cn, n_cn = vb, _NB_BUCKETS
        cr, n_cr = vb, _NB_BUCKETS
    else:
        ob = _bucket(q_offset, ka).reshape(n, 3) if n else np.zeros((0, 3), np.int64)
        cn, n_cn = vb * 64 + ob[:, 0] * 16 + ob[:, 1] * 4 + ob[:, 2], _NB_BUCKETS * 64
        dist = center_distance_bucket(q_offset, b) if n else np.zeros(0, np.int64)
        cr, n_cr = vb * 4 + dist, _NB_BUCKETS * 4
        if mode == "offset_normal":
            align = axis_alignment_bucket(q_normal) if n else np.zeros(0, np.int64)
            cr, n_cr = cr * 4 + align, n_cr * 4
    ctx_n = np.arange(2)[None, :] * n_cn + cn[:, None]
    return ctx_o, ctx_n, cr, (3 * _NB_BUCKETS, 2 * n_cn, n_cr)


def _alphabets(level, depth):
    b = float(1 << (depth - level))
    ka, kn, kr = offset_alphabet(b), normal_alphabet(), radius_alphabet(b)
    if max(ka, kr) > MAX_ALPHABET:
        raise PreconditionError(f"leaf level {level} too coarse for depth {depth} (alphabet > {MAX_ALPHABET})")
    return ka, kn, kr


def _model(alphabet, n_contexts):
    return AdaptiveModel(max(alphabet, 2), n_contexts)


# --------------------------------------------------------------------------- per-part coders


def encode_base(nodes: dict, l_min: int, config: GeometryCodecConfig) -> bytes:
    """Child patterns of all nodes at levels ``< l_min``, with the mode byte."""
    nonempty = nodes[0].codes.size > 0
    enc = RangeEncoder()
    if nonempty and l_min > 0:
        model = AdaptiveModel(2, l_min * 7 * 8)
        for k in range(l_min):
            codes = nodes[k].codes
            child = nodes[k + 1].codes
            bits = np.isin((codes[:, None] * 8 + np.arange(8)).reshape(-1), child).astype(np.int64)
            base = k * 7 + face_neighbor_count(codes, k, codes)
            enc.encode_grouped_bits(model, bits, base)
    return bytes([config.mode_byte(nonempty)]) + enc.finish()


def decode_base(data: bytes, l_min: int, max_nodes: int = 0):
    if not data:
        raise FormatError("missing base octree section")
    config, nonempty = GeometryCodecConfig.from_byte(data[0])
    levels = {}
    if not nonempty:
        return config, None
    levels[0] = np.zeros(1, np.int64)
    dec = RangeDecoder(data[1:])
    model = AdaptiveModel(2, max(l_min, 1) * 7 * 8)
    for k in range(l_min):
        codes = levels[k]
        base = k * 7 + face_neighbor_count(codes, k, codes)
        bits = dec.decode_grouped_bits(model, base).astype(bool)
        levels[k + 1] = (codes[:, None] * 8 + np.arange(8)).reshape(-1)[bits]
        _check_count(levels[k + 1], max_nodes, k + 1)
    return config, levels


def _check_count(codes, max_nodes, level, allow_empty=False):
    if max_nodes and codes.size > max_nodes:
        raise FormatError(f"level {level} decodes {codes.size} nodes, more than the {max_nodes} input points")
    if codes.size == 0 and not allow_empty:
        raise FormatError(f"level {level} decodes no occupied nodes")


def encode_occupancy(unknown, occupied, level, virtual_codes, use_context: bool) -> bytes:
    enc = RangeEncoder()
    if unknown.size:
        bits = np.isin(unknown, occupied).astype(np.int64)
        base = occupancy_contexts(unknown, level, virtual_codes, use_context)
        enc.encode_grouped_bits(AdaptiveModel(2, 7 * 8), bits, base)
    return enc.finish()


def occupancy_contexts(unknown, level, virtual_codes, use_context: bool = True) -> np.ndarray:
    """Per-child base context: virtual nodes among the 6 face neighbors (0..6).

    The coder adds the number of occupied siblings already coded.
    """
    if not use_context:
        return np.zeros(unknown.size, np.int64)
    return face_neighbor_count(unknown, level, virtual_codes)


def decode_occupancy(data, unknown, level, virtual_codes, use_context: bool) -> np.ndarray:
    if unknown.size == 0:
        return np.zeros(0, np.int64)
    base = occupancy_contexts(unknown, level, virtual_codes, use_context)
    bits = RangeDecoder(data).decode_grouped_bits(AdaptiveModel(2, 7 * 8), base, count=unknown.size)
    return unknown[bits.astype(bool)]


def encode_flags(leaf_flags) -> bytes:
    enc = RangeEncoder()
    if len(leaf_flags):
        enc.encode(AdaptiveModel(2, 1), np.asarray(leaf_flags, dtype=np.int64))
    return enc.finish()


def decode_flags(data, count) -> np.ndarray:
    if count == 0:
        return np.zeros(0, bool)
    return RangeDecoder(data).decode(AdaptiveModel(2, 1), count).astype(bool)


def encode_attributes(leaves: LeafSet, level: int, depth: int, vcount, mode: str) -> bytes:
    n = len(leaves)
    if n == 0:
        return b""
    ka, kn, kr = _alphabets(level, depth)
    co, cn, cr, sizes = attribute_contexts(level, depth, vcount, leaves.q_offset, leaves.q_normal, mode)
    streams = []
    for syms, ctx, k, nc in ((leaves.q_offset, co, ka, sizes[0]), (leaves.q_normal, cn, kn, sizes[1]),
                             (leaves.q_radius, cr, kr, sizes[2])):
        enc = RangeEncoder()
        enc.encode(_model(k, nc), syms.reshape(-1), ctx.reshape(-1))
        streams.append(enc.finish())
    return _LEN2.pack(len(streams[0]), len(streams[1])) + b"".join(streams)


def split_attribute_section(data: bytes) -> tuple[bytes, bytes, bytes]:
    if len(data) < _LEN2.size:
        raise FormatError("attribute section too short")
    lo, ln = _LEN2.unpack_from(data, 0)
    p = _LEN2.size
    if p + lo + ln > len(data):
        raise FormatError("attribute stream lengths overrun the section")
    return data[p:p + lo], data[p + lo:p + lo + ln], data[p + lo + ln:]


def decode_attributes(data: bytes, n: int, level: int, depth: int, vcount, mode: str):
    if n == 0:
        return np.zeros((0, 3), np.int64), np.zeros((0, 2), np.int64), np.zeros(0, np.int64)
    ka, kn, kr = _alphabets(level, depth)
    so, sn, sr = split_attribute_section(data)
    _, _, _, sizes = attribute_contexts(level, depth, vcount, np.zeros((n, 3), np.int64), np.zeros((n, 2), np.int64), mode)
    co = attribute_contexts(level, depth, vcount, np.zeros((n, 3), np.int64), np.zeros((n, 2), np.int64), mode)[0]
    qo = RangeDecoder(so).decode(_model(ka, sizes[0]), 3 * n, co.reshape(-1)).reshape(n, 3)
    cn = attribute_contexts(level, depth, vcount, qo, np.zeros((n, 2), np.int64), mode)[1]
    qn = RangeDecoder(sn).decode(_model(kn, sizes[1]), 2 * n, cn.reshape(-1)).reshape(n, 2)
    cr = attribute_contexts(level, depth, vcount, qo, qn, mode)[2]
    qr = RangeDecoder(sr).decode(_model(kr, sizes[2]), n, cr)
    return qo, qn, qr


# --------------------------------------------------------------------------- whole tree


def _leaf_world(leaves: LeafSet, level: int, depth: int):
    w = float(1 << (depth - level))
    return morton_decode(leaves.codes, level).astype(np.float64) * w + leaves.offsets


def _canonical(leaves: LeafSet) -> LeafSet:
    # rebuild reconstructions from indices so encoder and decoder contexts agree bit for bit
    return dequantized_leaves(leaves.codes, leaves.q_offset, leaves.q_normal, leaves.q_radius)


def _check_steps(header: BitstreamHeader):
    if (header.offset_step, header.normal_step, header.radius_step) != (OFFSET_STEP, NORMAL_STEP, RADIUS_STEP):
        raise FormatError("unsupported quantization steps")


def encode_geometry(tree: SurfelOctree, config: GeometryCodecConfig | None = None) -> dict[int, bytes]:
    """Section payloads ``{section id: bytes}`` for a quantized tree."""
    config = config or GeometryCodecConfig()
    if not tree.quantized:
        raise PreconditionError("encode_geometry needs a quantized tree")
    depth, lmin, lmax = tree.depth, tree.l_min, tree.l_max
    for l in tree.leaf_levels:
        _alphabets(l, depth)
    occ, flags, attrs = {}, {}, {}
    base = encode_base(tree.nodes, lmin, config)
    nonempty = tree.nodes[0].codes.size > 0
    leaves = {l: _canonical(tree.leaf_set(l)) if len(tree.leaf_set(l)) else LeafSet.empty() for l in tree.leaf_levels}
    virtual = None
    offset = 0
    for l in range(lmin, lmax + 1):
        if l > lmin:
            prev = leaves.get(l - 1, LeafSet.empty())
            src = offset - len(prev) + np.arange(len(prev))
            virtual = ctxmod.step(virtual, prev.codes, src, _leaf_world(prev, l - 1, depth), prev.normals,
                                  prev.radii, l, depth)
            parents = tree.nodes[l - 1]
            split = parents.codes[~parents.leaf]
            unknown = (split[:, None] * 8 + np.arange(8)).reshape(-1)
            occ[l] = encode_occupancy(unknown, tree.nodes[l].codes, l, virtual.codes, config.occupancy_context)
        if l < lmax:
            flags[l] = encode_flags(tree.nodes[l].leaf.astype(np.int64)) if nonempty else b""
        s = leaves.get(l, LeafSet.empty())
        if l in tree.leaf_levels:
            vcodes = virtual.codes if virtual is not None else np.zeros(0, np.int64)
            vcount = face_neighbor_count(s.codes, l, vcodes)
            attrs[l] = encode_attributes(s, l, depth, vcount, config.attr_context)
        offset += len(s) if l in tree.leaf_levels else 0
    sections = {section_id(SECTION_BASE, 0): base}
    for l in range(lmin + 1, lmax + 1):
        sections[section_id(SECTION_OCCUPANCY, l)] = occ[l]
    for l in range(lmin, lmax):
        sections[section_id(SECTION_FLAGS, l)] = flags[l]
    for l in tree.leaf_levels:
        sections[section_id(SECTION_ATTRIBUTES, l)] = attrs[l]
    return sections


def decode_geometry(sections: dict[int, bytes], header: BitstreamHeader) -> SurfelOctree:
    """Inverse of :func:`encode_geometry`; raises :class:`FormatError` or
    :class:`StreamError` on malformed input."""
    _check_steps(header)
    depth = header.depth
    levels = tuple(sorted(header.leaf_levels))
    lmin, lmax = levels[0], levels[-1]
    if lmax > depth:
        raise FormatError("leaf level deeper than the tree")
    try:
        for l in levels:
            _alphabets(l, depth)
    except PreconditionError as e:
        raise FormatError(str(e)) from None
    sizes = {l: header.patch_sizes.get(l, 0) for l in levels}
    get = lambda kind, l: sections.get(section_id(kind, l), b"")
    config, base_levels = decode_base(get(SECTION_BASE, 0), lmin, header.n_points)
    if base_levels is None:
        if any(len(v) for k, v in sections.items() if k != section_id(SECTION_BASE, 0)):
            raise FormatError("empty tree with nonempty sections")
        return SurfelOctree.empty(depth, levels, sizes)
    occupied = dict(base_levels)
    leaves: dict[int, LeafSet] = {}
    virtual = None
    offset = 0
    leaf_flags = {}
    for l in range(lmin, lmax + 1):
        if l > lmin:
            prev = leaves.get(l - 1, LeafSet.empty())
            src = offset - len(prev) + np.arange(len(prev))
            virtual = ctxmod.step(virtual, prev.codes, src, _leaf_world(prev, l - 1, depth), prev.normals,
                                  prev.radii, l, depth)
            split = occupied[l - 1][~leaf_flags[l - 1]]
            unknown = (split[:, None] * 8 + np.arange(8)).reshape(-1)
            occupied[l] = decode_occupancy(get(SECTION_OCCUPANCY, l), unknown, l, virtual.codes, config.occupancy_context)
            if split.size and not np.isin(split, occupied[l] >> 3).all():
                raise FormatError(f"split node without children at level {l - 1}")
            _check_count(occupied[l], header.n_points, l, allow_empty=True)
        codes = occupied[l]
        if l < lmax:
            leaf_flags[l] = decode_flags(get(SECTION_FLAGS, l), codes.size)
            if l not in levels and leaf_flags[l].any():
                raise FormatError(f"leaf flag set at non-leaf level {l}")
        else:
            leaf_flags[l] = np.ones(codes.size, bool)
        if l in levels:
            lc = codes[leaf_flags[l]]
            vcodes = virtual.codes if virtual is not None else np.zeros(0, np.int64)
            vcount = face_neighbor_count(lc, l, vcodes)
            qo, qn, qr = decode_attributes(get(SECTION_ATTRIBUTES, l), lc.size, l, depth, vcount, config.attr_context)
            leaves[l] = dequantized_leaves(lc, qo, qn, qr)
            offset += lc.size
    tree = SurfelOctree.from_leaves(depth, levels, sizes, leaves)
    for l in range(lmin, lmax + 1):
        if not np.array_equal(tree.nodes[l].codes, occupied[l]):
            raise FormatError(f"decoded occupancy inconsistent at level {l}")
    try:
        tree.validate()
    except ValueError as e:
        raise FormatError(f"decoded tree invalid: {e}") from None
    return tree


def geometry_bits(sections: dict[int, bytes]) -> dict[str, int]:
    """Measured bits per stream kind (attribute streams split into their three passes)."""
    out = {"base": 0, "occupancy": 0, "flags": 0, "offset": 0, "normal": 0, "radius": 0}
    for sid, data in sections.items():
        kind = sid >> 8
        if kind == SECTION_BASE:
            out["base"] += 8 * len(data)
        elif kind == SECTION_OCCUPANCY:
            out["occupancy"] += 8 * len(data)
        elif kind == SECTION_FLAGS:
            out["flags"] += 8 * len(data)
        elif kind == SECTION_ATTRIBUTES and data:
            so, sn, sr = split_attribute_section(data)
            out["offset"] += 8 * (len(so) + _LEN2.size)
            out["normal"] += 8 * len(sn)
            out["radius"] += 8 * len(sr)
    return out


__all__ = [
    "GeometryCodecConfig",
    "StreamError",
    "FormatError",
    "encode_geometry",
    "decode_geometry",
    "geometry_bits",
]
