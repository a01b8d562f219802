"""Packed-texture coding: an internal 8x8 DCT codec and a lossless PNG route.

Internal codec, per level image: full-range BT.601 YCbCr on a 0..255 scale,
edge-replicated to a multiple of 8, orthonormal 8x8 DCT-II per block and
channel, flat quantizer step ``2 * Qt``, zigzag scan. DC values are DPCM
coded per channel; every block becomes JPEG-style symbols (a size category
for DC, ``run << 4 | size`` with EOB ``0x00`` and ZRL ``0xF0`` for AC) coded
by the range coder with adaptive models, while the magnitude bits follow as
a raw packed bit string.

Level payload::

    u16 width | u16 height | u32 symbol-stream length | symbols | raw bits
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numba as nb
import numpy as np
from scipy.fft import dctn, idctn

from .core.container import TEXTURE_EXTERNAL_RAW, TEXTURE_INTERNAL_DCT, FormatError
from .core.types import PreconditionError
from .geocodec.rangecoder import (
    StreamError,
    _adaptive_find,
    _adaptive_lookup,
    _adaptive_update,
    _dec_consume,
    _dec_init,
    _enc,
    _flush,
)
from .texture import PackedTextureImage

CODEC_NAMES = {TEXTURE_INTERNAL_DCT: "internal-dct", TEXTURE_EXTERNAL_RAW: "external-raw"}
CODEC_IDS = {v: k for k, v in CODEC_NAMES.items()}
QT_RANGE = (1, 63)

_PAYLOAD = struct.Struct("<HHI")

# BT.601 full range
_RGB2YCC = np.array([
    [0.299, 0.587, 0.114],
    [-0.168735891647856, -0.331264108352144, 0.5],
    [0.5, -0.418687589158345, -0.081312410841655],
])
_YCC2RGB = np.linalg.inv(_RGB2YCC)
_YCC_OFFSET = np.array([0.0, 0.5, 0.5])


def rgb_to_ycbcr(image) -> np.ndarray:
    """Full-range BT.601; chroma centered on 0.5. Inputs and outputs in [0, 1]."""
    img = np.asarray(image, dtype=np.float64)
    return img @ _RGB2YCC.T + _YCC_OFFSET


def ycbcr_to_rgb(image) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    return (img - _YCC_OFFSET) @ _YCC2RGB.T


def _zigzag_order(n=8) -> np.ndarray:
    idx = sorted(((i, j) for i in range(n) for j in range(n)),
                 key=lambda p: (p[0] + p[1], p[1] if (p[0] + p[1]) % 2 == 0 else p[0]))
    return np.array([i * n + j for i, j in idx], dtype=np.int64)


ZIGZAG = _zigzag_order()
_UNZIGZAG = np.argsort(ZIGZAG)


def quant_step(qt: int) -> float:
    return 2.0 * qt


def _check_qt(qt):
    if not QT_RANGE[0] <= int(qt) <= QT_RANGE[1]:
        raise PreconditionError(f"Qt {qt} outside [{QT_RANGE[0]}, {QT_RANGE[1]}]")


def pad_to_blocks(img: np.ndarray, block: int = 8) -> np.ndarray:
    h, w = img.shape[:2]
    ph, pw = (-h) % block, (-w) % block
    if ph or pw:
        img = np.pad(img, ((0, ph), (0, pw), (0, 0)), mode="edge")
    return img


def _to_blocks(plane: np.ndarray) -> np.ndarray:
    h, w = plane.shape
    return plane.reshape(h // 8, 8, w // 8, 8).transpose(0, 2, 1, 3).reshape(-1, 8, 8)


def _from_blocks(blocks: np.ndarray, h: int, w: int) -> np.ndarray:
    return blocks.reshape(h // 8, w // 8, 8, 8).transpose(0, 2, 1, 3).reshape(h, w)


def forward_blocks(img: np.ndarray, qt: int) -> np.ndarray:
    """Quantized zigzag coefficients, shape ``(3, n_blocks, 64)``."""
    ycc = pad_to_blocks(rgb_to_ycbcr(img)) * 255.0 - 128.0
    step = quant_step(qt)
    out = []
    for c in range(3):
        blocks = _to_blocks(ycc[..., c])
        coef = dctn(blocks, type=2, axes=(1, 2), norm="ortho").reshape(-1, 64)
        out.append(np.rint(coef / step).astype(np.int64)[:, ZIGZAG])
    return np.stack(out)


def inverse_blocks(q: np.ndarray, qt: int, h: int, w: int) -> np.ndarray:
    hp, wp = h + (-h) % 8, w + (-w) % 8
    step = quant_step(qt)
    planes = []
    for c in range(3):
        coef = (q[c][:, _UNZIGZAG] * step).reshape(-1, 8, 8)
        planes.append(_from_blocks(idctn(coef, type=2, axes=(1, 2), norm="ortho"), hp, wp))
    ycc = (np.stack(planes, axis=-1) + 128.0) / 255.0
    return np.clip(ycbcr_to_rgb(ycc)[:h, :w], 0.0, 1.0)


# --------------------------------------------------------------------------- symbol kernels


@nb.njit(cache=True, inline="always")
def _size_of(v):
    a = -v if v < 0 else v
    s = 0
    while a > 0:
        s += 1
        a >>= 1
    return s


@nb.njit(cache=True, inline="always")
def _put_bits(bits, bp, v, s):
    # JPEG convention: negative values stored as v + 2**s - 1
    if v < 0:
        v = v + (1 << s) - 1
    for k in range(s - 1, -1, -1):
        bits[bp] = (v >> k) & 1
        bp += 1
    return bp


@nb.njit(cache=True)
def _encode_coeffs(st, buf, bits, q, dc_counts, ac_counts):
    bp = 0
    for c in range(q.shape[0]):
        cls = 0 if c == 0 else 1
        prev = 0
        for b in range(q.shape[1]):
            d = q[c, b, 0] - prev
            prev = q[c, b, 0]
            s = _size_of(d)
            cnt = dc_counts[cls]
            start, freq, total = _adaptive_lookup(cnt, s)
            _enc(st, buf, start, freq, total)
            _adaptive_update(cnt, s)
            bp = _put_bits(bits, bp, d, s)
            run = 0
            last = 0
            for k in range(63, 0, -1):
                if q[c, b, k] != 0:
                    last = k
                    break
            for k in range(1, last + 1):
                v = q[c, b, k]
                if v == 0:
                    run += 1
                    continue
                while run > 15:
                    cnt = ac_counts[cls]
                    start, freq, total = _adaptive_lookup(cnt, 0xF0)
                    _enc(st, buf, start, freq, total)
                    _adaptive_update(cnt, 0xF0)
                    run -= 16
                s = _size_of(v)
                sym = (run << 4) | s
                cnt = ac_counts[cls]
                start, freq, total = _adaptive_lookup(cnt, sym)
                _enc(st, buf, start, freq, total)
                _adaptive_update(cnt, sym)
                bp = _put_bits(bits, bp, v, s)
                run = 0
            if last < 63:
                cnt = ac_counts[cls]
                start, freq, total = _adaptive_lookup(cnt, 0)
                _enc(st, buf, start, freq, total)
                _adaptive_update(cnt, 0)
    return bp


@nb.njit(cache=True, inline="always")
def _get_bits(bits, bp, s, err):
    if bp + s > bits.shape[0]:
        err[0] = 1
        return 0, bp
    v = 0
    for k in range(s):
        v = (v << 1) | bits[bp + k]
    bp += s
    if s > 0 and v < (1 << (s - 1)):
        v = v - (1 << s) + 1
    return v, bp


@nb.njit(cache=True)
def _decode_coeffs(st, buf, bits, out, dc_counts, ac_counts, err):
    bp = 0
    _dec_init(st, buf)
    if st[3] != 0:
        return
    for c in range(out.shape[0]):
        cls = 0 if c == 0 else 1
        prev = 0
        for b in range(out.shape[1]):
            cnt = dc_counts[cls]
            s, start, freq, total = _adaptive_find(cnt, st)
            _dec_consume(st, buf, start, freq, total)
            _adaptive_update(cnt, s)
            d, bp = _get_bits(bits, bp, s, err)
            prev += d
            out[c, b, 0] = prev
            k = 1
            while k < 64:
                cnt = ac_counts[cls]
                sym, start, freq, total = _adaptive_find(cnt, st)
                _dec_consume(st, buf, start, freq, total)
                _adaptive_update(cnt, sym)
                if sym == 0:
                    break
                run = sym >> 4
                s = sym & 15
                k += run
                if k > 63 or (s == 0 and sym != 0xF0):
                    err[0] = 2
                    return
                if s == 0:
                    k += 1
                    continue
                v, bp = _get_bits(bits, bp, s, err)
                out[c, b, k] = v
                k += 1
            if st[3] != 0 or err[0] != 0:
                return


def _models():
    # 16 DC size categories, 256 AC (run, size) symbols; one context for luma, one for chroma
    dc = np.full((2, 16), (1 << 16) // 16, np.int64)
    ac = np.full((2, 256), (1 << 16) // 256, np.int64)
    return dc, ac


def encode_image(img: np.ndarray, qt: int) -> bytes:
    _check_qt(qt)
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[:2]
    if h == 0 or w == 0:
        return b""
    q = np.ascontiguousarray(forward_blocks(img, qt))
    if np.abs(q).max() >= (1 << 15):
        raise PreconditionError("coefficient out of range")
    n = q.shape[0] * q.shape[1]
    st = np.array([0, 0xFFFFFFFF, 0, 1, 0], np.int64)
    buf = np.zeros(n * 64 * 3 + 64, np.uint8)
    bits = np.zeros(n * 64 * 16, np.uint8)
    dc, ac = _models()
    nbits = _encode_coeffs(st, buf, bits, q, dc, ac)
    _flush(st, buf)
    sym = bytes(buf[: st[4]])
    raw = np.packbits(bits[:nbits]).tobytes()
    return _PAYLOAD.pack(w, h, len(sym)) + sym + raw


def decode_image(data: bytes, qt: int, shape: tuple[int, int] | None = None) -> np.ndarray:
    if not data:
        if shape and shape[0] * shape[1]:
            raise StreamError("empty texture payload")
        return np.zeros((0, 0, 3))
    if len(data) < _PAYLOAD.size:
        raise StreamError("truncated texture payload")
    w, h, ls = _PAYLOAD.unpack_from(data, 0)
    if shape is not None and (h, w) != tuple(shape):
        raise FormatError(f"texture payload is {h}x{w}, layout expects {shape[0]}x{shape[1]}")
    if _PAYLOAD.size + ls > len(data) or w == 0 or h == 0:
        raise StreamError("texture symbol stream overruns payload")
    sym = np.frombuffer(data, np.uint8, ls, _PAYLOAD.size)
    bits = np.unpackbits(np.frombuffer(data, np.uint8, offset=_PAYLOAD.size + ls))
    n_blocks = ((h + 7) // 8) * ((w + 7) // 8)
    out = np.zeros((3, n_blocks, 64), np.int64)
    st = np.zeros(4, np.int64)
    err = np.zeros(1, np.int64)
    dc, ac = _models()
    _decode_coeffs(st, sym, bits, out, dc, ac, err)
    if st[3] == 1 or err[0] == 1:
        raise StreamError("texture stream truncated")
    if st[3] == 2 or err[0] == 2:
        raise StreamError("inconsistent texture stream")
    return inverse_blocks(out, qt, h, w)


# --------------------------------------------------------------------------- level streams


@dataclass
class TextureStream:
    codec: int
    qt: int
    payloads: dict[int, bytes] = field(default_factory=dict)

    @property
    def codec_name(self) -> str:
        return CODEC_NAMES[self.codec]

    def nbytes(self) -> int:
        return sum(len(p) for p in self.payloads.values())


def _png_bytes(img: np.ndarray) -> bytes:
    from PIL import Image

    px = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    out = io.BytesIO()
    Image.fromarray(px, mode="RGB").save(out, format="PNG", optimize=False, compress_level=9)
    return out.getvalue()


def _png_decode(data: bytes) -> np.ndarray:
    from PIL import Image, UnidentifiedImageError

    try:
        img = Image.open(io.BytesIO(data))
        img.load()
    except (UnidentifiedImageError, OSError, ValueError) as e:
        raise FormatError(f"bad PNG payload: {e}") from None
    return np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0


def encode_texture(images: list[PackedTextureImage], qt: int = 10, codec: str | int = "internal-dct") -> TextureStream:
    """One payload per packed level image (levels without leaves give empty payloads)."""
    cid = CODEC_IDS[codec] if isinstance(codec, str) else int(codec)
    if cid not in CODEC_NAMES:
        raise PreconditionError(f"unknown texture codec {codec!r}")
    if cid == TEXTURE_INTERNAL_DCT:
        _check_qt(qt)
    stream = TextureStream(cid, int(qt) if cid == TEXTURE_INTERNAL_DCT else 0)
    for img in images:
        if img.n_patches == 0:
            stream.payloads[img.level] = b""
        elif cid == TEXTURE_INTERNAL_DCT:
            stream.payloads[img.level] = encode_image(img.image, qt)
        else:
            stream.payloads[img.level] = _png_bytes(img.image)
    return stream


def decode_texture(stream: TextureStream, layouts: list[PackedTextureImage]) -> dict[int, np.ndarray]:
    """Patches per level; ``layouts`` (from the decoded geometry) fix each image's shape."""
    out = {}
    for lay in layouts:
        data = stream.payloads.get(lay.level, b"")
        M = lay.patch_size
        if lay.n_patches == 0:
            if data:
                raise FormatError(f"texture payload for empty level {lay.level}")
            out[lay.level] = np.zeros((0, M, M, 3))
            continue
        side = lay.grid_side * M
        if stream.codec == TEXTURE_INTERNAL_DCT:
            img = decode_image(data, stream.qt, (side, side))
        elif stream.codec == TEXTURE_EXTERNAL_RAW:
            img = _png_decode(data)
            if img.shape[:2] != (side, side):
                raise FormatError(f"level {lay.level} PNG is {img.shape[:2]}, expected {(side, side)}")
        else:
            raise FormatError(f"unknown texture codec id {stream.codec}")
        from .texture import unpack_array

        out[lay.level] = unpack_array(PackedTextureImage(lay.level, M, lay.grid_side, lay.n_patches, img))
    return out
