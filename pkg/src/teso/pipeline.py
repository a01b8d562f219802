"""End-to-end encoder and decoder: point cloud <-> container bytes."""

from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field

from .builder import BuildConfig, build_teso, estimate_normals
from .core.container import (
    SECTION_TEXTURE,
    TEXTURE_INTERNAL_DCT,
    TEXTURE_NONE,
    BitstreamHeader,
    FormatError,
    parse,
    section_id,
    serialize,
)
from .core.types import PointCloud, SurfelOctree
from .geocodec.codec import GeometryCodecConfig, decode_geometry, encode_geometry, geometry_bits
from .quant import NORMAL_STEP, OFFSET_STEP, RADIUS_STEP, quantize_tree
from .texcodec import CODEC_IDS, TextureStream, decode_texture, encode_texture
from .texture import layout_for, pack_patches, sample_patches

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class EncoderSettings:
    tau: float = 66.0
    levels: tuple[int, ...] | None = None  # default: depth-4 .. depth-2
    qt: int = 10
    texture_codec: str = "internal-dct"  # or "external-raw" / "none"
    K: int = 3
    patch_sizes: dict[int, int] | None = None
    geometry: GeometryCodecConfig = field(default_factory=GeometryCodecConfig)

    def with_qt(self, qt: int) -> "EncoderSettings":
        return dataclasses.replace(self, qt=int(qt))

    def build_config(self, depth: int) -> BuildConfig:
        if self.levels is None:
            return BuildConfig.for_depth(depth, tau=self.tau, patch_sizes=self.patch_sizes)
        return BuildConfig(leaf_levels=tuple(self.levels), tau=self.tau, patch_sizes=self.patch_sizes)


@dataclass
class EncodeReport:
    n_points: int
    total_bytes: int
    geometry_bits: int
    texture_bits: int
    header_bits: int
    breakdown: dict[str, int]
    timings: dict[str, float]
    tree: SurfelOctree
    cache: dict = field(repr=False, default_factory=dict)

    @property
    def bpp(self) -> float:
        return 8.0 * self.total_bytes / max(self.n_points, 1)


def _texture_id(name: str) -> int:
    return TEXTURE_NONE if name == "none" else CODEC_IDS[name]


def encode_teso(cloud: PointCloud, settings: EncoderSettings | None = None, cache: dict | None = None,
                tree: SurfelOctree | None = None) -> tuple[bytes, EncodeReport]:
    """Build, quantize, texture and entropy-code ``cloud``.

    ``cache`` (from a previous report with the same tau/levels) skips the
    geometry stages; ``tree`` may supply a pre-built unquantized tree.
    """
    settings = settings or EncoderSettings()
    timings = {}
    cache = dict(cache or {})
    if "tree" not in cache:
        t0 = time.perf_counter()
        if tree is None:
            if cloud.normals is None:
                cloud = estimate_normals(cloud)
                timings["normals"] = time.perf_counter() - t0
            t1 = time.perf_counter()
            tree = build_teso(cloud, settings.build_config(cloud.depth))
            timings["build"] = time.perf_counter() - t1
        t1 = time.perf_counter()
        q = quantize_tree(tree)
        # patches are sampled on the geometry the decoder will see
        q = sample_patches(q, cloud, K=settings.K) if settings.texture_codec != "none" else q
        timings["texture_sampling"] = time.perf_counter() - t1
        t1 = time.perf_counter()
        cache["geometry"] = encode_geometry(q, settings.geometry)
        timings["geometry_coding"] = time.perf_counter() - t1
        cache["tree"] = q
    q = cache["tree"]
    sections = dict(cache["geometry"])
    tex_id = _texture_id(settings.texture_codec)
    qt = settings.qt if tex_id == TEXTURE_INTERNAL_DCT else 0
    tex_bits = 0
    if tex_id != TEXTURE_NONE:
        t1 = time.perf_counter()
        images = [pack_patches(q, l) for l in q.leaf_levels]
        stream = encode_texture(images, qt=qt if qt else 10, codec=tex_id)
        for l, payload in stream.payloads.items():
            sections[section_id(SECTION_TEXTURE, l)] = payload
            tex_bits += 8 * len(payload)
        timings["texture_coding"] = time.perf_counter() - t1
    header = BitstreamHeader(
        depth=q.depth, leaf_levels=tuple(q.leaf_levels), patch_sizes=dict(q.patch_sizes), tau=float(settings.tau),
        offset_step=OFFSET_STEP, normal_step=NORMAL_STEP, radius_step=RADIUS_STEP,
        texture_codec=tex_id, qt=qt, n_points=len(cloud),
    )
    data = serialize(header, sections)
    breakdown = geometry_bits(cache["geometry"])
    geo = sum(breakdown.values())
    breakdown["texture"] = tex_bits
    report = EncodeReport(len(cloud), len(data), geo, tex_bits, 8 * len(data) - geo - tex_bits, breakdown,
                          timings, q, cache)
    log.info("encoded %d points into %d bytes (%.4f bpp)", len(cloud), len(data), report.bpp)
    return data, report


def decode_teso(data: bytes) -> SurfelOctree:
    """Container bytes to a quantized tree, with patches when texture is present."""
    c = parse(data)
    tree = decode_geometry({k: v for k, v in c.sections.items() if k >> 8 != SECTION_TEXTURE}, c.header)
    if c.header.texture_codec == TEXTURE_NONE:
        if any(k >> 8 == SECTION_TEXTURE and v for k, v in c.sections.items()):
            raise FormatError("texture sections present but texture codec is none")
        return tree
    levels = set(tree.leaf_levels)
    extra = [k & 0xFF for k in c.sections if k >> 8 == SECTION_TEXTURE and (k & 0xFF) not in levels]
    if extra:
        raise FormatError(f"texture section for non-leaf level {extra[0]}")
    payloads = {l: c.section(SECTION_TEXTURE, l) for l in tree.leaf_levels}
    stream = TextureStream(c.header.texture_codec, c.header.qt, payloads)
    patches = decode_texture(stream, [layout_for(tree, l) for l in tree.leaf_levels])
    return tree.with_patches(patches)


def container_info(data: bytes) -> dict:
    """Header fields and per-kind section sizes."""
    c = parse(data)
    h = c.header
    kinds = {1: "base", 2: "occupancy", 3: "flags", 4: "attributes", 5: "texture"}
    sizes: dict[str, int] = {}
    for sid, payload in c.sections.items():
        name = kinds.get(sid >> 8, f"kind{sid >> 8}")
        sizes[name] = sizes.get(name, 0) + len(payload)
    return {
        "depth": h.depth, "leaf_levels": list(h.leaf_levels), "patch_sizes": {int(k): v for k, v in h.patch_sizes.items()},
        "tau": h.tau, "texture_codec": h.texture_codec, "qt": h.qt, "n_points": h.n_points,
        "total_bytes": len(data), "bpp": 8.0 * len(data) / max(h.n_points, 1), "section_bytes": sizes,
        "n_sections": len(c.sections),
    }
