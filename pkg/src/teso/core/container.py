"""Sectioned, versioned TeSO bitstream container.

Little-endian layout (see FORMAT.md)::

    magic "TESO" | u16 version | u8 depth | u8 n_levels | n_levels x (u8 level, u8 M)
    | f64 tau | f64 offset_step | f64 normal_step | f64 radius_step
    | u8 base_codec | u8 texture_codec | u8 qt | u8 reserved | u32 n_points
    | u16 n_sections | n_sections x (u16 id, u32 offset, u32 length) | payload

Section offsets are relative to the start of the payload, which follows the
section table directly. Sections must tile the payload exactly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

MAGIC = b"TESO"
VERSION = 1

BASE_CODEC_INTERNAL = 0
BASE_CODEC_GPCC = 1  # reserved, not produced by this library

TEXTURE_NONE = 0
TEXTURE_INTERNAL_DCT = 1
TEXTURE_EXTERNAL_RAW = 2

# section id = kind << 8 | level
SECTION_BASE = 0x01
SECTION_OCCUPANCY = 0x02
SECTION_FLAGS = 0x03
SECTION_ATTRIBUTES = 0x04
SECTION_TEXTURE = 0x05

_FIXED = struct.Struct("<4sHBB")
_TAIL = struct.Struct("<ddddBBBBI")
_ENTRY = struct.Struct("<HII")


class FormatError(ValueError):
    """Malformed container bytes."""


def section_id(kind: int, level: int = 0) -> int:
    return (kind << 8) | level


def section_kind(sid: int) -> tuple[int, int]:
    return sid >> 8, sid & 0xFF


@dataclass(frozen=True)
class BitstreamHeader:
    depth: int
    leaf_levels: tuple[int, ...]
    patch_sizes: dict[int, int]
    tau: float = 0.0
    offset_step: float = 0.5
    normal_step: float = 1.0 / 64.0
    radius_step: float = 1.0 / 16.0
    base_codec: int = BASE_CODEC_INTERNAL
    texture_codec: int = TEXTURE_NONE
    qt: int = 0
    n_points: int = 0
    version: int = VERSION

    @property
    def l_min(self) -> int:
        return min(self.leaf_levels)

    @property
    def l_max(self) -> int:
        return max(self.leaf_levels)

    def fixed_size(self) -> int:
        return _FIXED.size + 2 * len(self.leaf_levels) + _TAIL.size + 2


@dataclass
class Container:
    header: BitstreamHeader
    sections: dict[int, bytes] = field(default_factory=dict)

    def section(self, kind: int, level: int = 0) -> bytes:
        return self.sections.get(section_id(kind, level), b"")


def serialize(header: BitstreamHeader, sections) -> bytes:
    """Pack a header and ``{id: bytes}`` (or ``[(id, bytes)]``) into container bytes."""
    items = list(sections.items()) if isinstance(sections, dict) else list(sections)
    ids = [sid for sid, _ in items]
    if len(set(ids)) != len(ids):
        raise FormatError("duplicate section ids")
    levels = list(header.leaf_levels)
    out = bytearray(_FIXED.pack(MAGIC, header.version, header.depth, len(levels)))
    for l in levels:
        out += struct.pack("<BB", l, header.patch_sizes.get(l, 0))
    out += _TAIL.pack(
        float(header.tau), header.offset_step, header.normal_step, header.radius_step,
        header.base_codec, header.texture_codec, header.qt, 0, header.n_points,
    )
    out += struct.pack("<H", len(items))
    offset = 0
    for sid, payload in items:
        out += _ENTRY.pack(sid, offset, len(payload))
        offset += len(payload)
    for _, payload in items:
        out += payload
    return bytes(out)


def parse(data: bytes) -> Container:
    """Inverse of :func:`serialize`; raises :class:`FormatError` on any defect."""
    data = bytes(data)
    try:
        magic, version, depth, n_levels = _FIXED.unpack_from(data, 0)
    except struct.error:
        raise FormatError("truncated header") from None
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    pos = _FIXED.size
    levels, sizes = [], {}
    try:
        for _ in range(n_levels):
            l, m = struct.unpack_from("<BB", data, pos)
            pos += 2
            levels.append(l)
            sizes[l] = m
        tau, ostep, nstep, rstep, base, tex, qt, _, npts = _TAIL.unpack_from(data, pos)
        pos += _TAIL.size
        (n_sections,) = struct.unpack_from("<H", data, pos)
        pos += 2
        table = []
        for _ in range(n_sections):
            table.append(_ENTRY.unpack_from(data, pos))
            pos += _ENTRY.size
    except struct.error:
        raise FormatError("truncated header or section table") from None
    if not levels or len(set(levels)) != n_levels or max(levels) > depth or not 0 < depth <= 21:
        raise FormatError("inconsistent level configuration")
    payload = data[pos:]
    sections: dict[int, bytes] = {}
    expect = 0
    for sid, off, length in table:
        if off != expect:
            raise FormatError(f"section {sid:#06x} at offset {off}, expected {expect}")
        if off + length > len(payload):
            raise FormatError(f"section {sid:#06x} overruns payload")
        if sid in sections:
            raise FormatError(f"duplicate section id {sid:#06x}")
        sections[sid] = payload[off:off + length]
        expect = off + length
    if expect != len(payload):
        raise FormatError(f"payload has {len(payload) - expect} trailing bytes")
    header = BitstreamHeader(
        depth=depth, leaf_levels=tuple(levels), patch_sizes=sizes, tau=tau,
        offset_step=ostep, normal_step=nstep, radius_step=rstep,
        base_codec=base, texture_codec=tex, qt=qt, n_points=npts, version=version,
    )
    return Container(header, sections)
