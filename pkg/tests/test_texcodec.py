import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from teso.core.container import FormatError
from teso.core.types import PreconditionError
from teso.geocodec.rangecoder import StreamError
from teso.texcodec import (
    ZIGZAG,
    TextureStream,
    decode_image,
    decode_texture,
    encode_image,
    encode_texture,
    forward_blocks,
    rgb_to_ycbcr,
    ycbcr_to_rgb,
)
from teso.texture import layout_for, pack_array, pack_patches


def psnr(a, b):
    mse = np.mean((a - b) ** 2)
    return math.inf if mse == 0 else 10 * math.log10(1 / mse)


def smooth_image(rng, side=64):
    y, x = np.mgrid[0:side, 0:side] / side
    img = np.stack([0.5 + 0.4 * np.sin(6 * x + c) * np.cos(4 * y - c) for c in range(3)], -1)
    return np.clip(img + rng.normal(scale=0.02, size=img.shape), 0, 1)


def test_ycbcr_examples(rng):
    np.testing.assert_allclose(rgb_to_ycbcr([0.5, 0.5, 0.5]), [0.5, 0.5, 0.5], atol=1e-12)
    y = rgb_to_ycbcr([1.0, 0, 0])
    assert y[0] == pytest.approx(0.299)
    assert y[2] == pytest.approx(1.0)  # Cr of red saturates at the top of the range
    img = rng.uniform(size=(32, 32, 3))
    assert np.abs(ycbcr_to_rgb(rgb_to_ycbcr(img)) - img).max() < 1 / 1024


def dct_matrix(n=8):
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    C = np.sqrt(2 / n) * np.cos(np.pi * (2 * i + 1) * k / (2 * n))
    C[0] /= np.sqrt(2)
    return C


def test_forward_matches_direct_dct(rng):
    img = rng.uniform(size=(8, 8, 3))
    q = forward_blocks(img, 1)
    C = dct_matrix()
    ycc = rgb_to_ycbcr(img) * 255 - 128
    for c in range(3):
        coef = C @ ycc[..., c] @ C.T
        np.testing.assert_array_equal(q[c, 0], np.rint(coef.ravel()[ZIGZAG] / 2.0).astype(int))


def test_zigzag_start():
    assert ZIGZAG[:6].tolist() == [0, 1, 8, 16, 9, 2]
    assert sorted(ZIGZAG.tolist()) == list(range(64))


@pytest.mark.parametrize("qt", [1, 10, 40, 63])
def test_constant_color(qt):
    img = np.broadcast_to([0.3, 0.6, 0.2], (24, 16, 3)).copy()
    q = forward_blocks(img, qt)
    assert np.all(q[:, :, 1:] == 0)
    out = decode_image(encode_image(img, qt), qt)
    # DC error at most half a step per channel, mapped through the color transform
    assert np.abs(out - img).max() <= 3 * (qt / 8) / 255 + 1e-9


def test_qt1_random_psnr(rng):
    img = rng.uniform(size=(64, 64, 3))
    out = decode_image(encode_image(img, 1), 1)
    assert psnr(out, img) >= 45


def test_rate_and_distortion_monotone(rng):
    img = smooth_image(rng)
    sizes, errs = [], []
    for qt in (10, 25, 40):
        data = encode_image(img, qt)
        sizes.append(len(data))
        errs.append(np.mean((decode_image(data, qt) - img) ** 2))
    assert sizes[0] > sizes[1] > sizes[2]
    assert errs[0] <= errs[1] <= errs[2]


def test_deterministic(rng):
    img = smooth_image(rng)
    assert encode_image(img, 12) == encode_image(img.copy(), 12)


@given(st.integers(1, 40), st.integers(1, 40), st.integers(0, 2**32 - 1))
def test_odd_sizes(h, w, seed):
    img = np.random.default_rng(seed).uniform(size=(h, w, 3))
    out = decode_image(encode_image(img, 2), 2, (h, w))
    assert out.shape == (h, w, 3)
    assert psnr(out, img) > 35


def test_bad_qt_and_truncation(rng):
    img = rng.uniform(size=(16, 16, 3))
    with pytest.raises(PreconditionError):
        encode_image(img, 0)
    with pytest.raises(PreconditionError):
        encode_image(img, 64)
    data = encode_image(img, 5)
    for cut in (3, 10, len(data) // 2):
        with pytest.raises(StreamError):
            decode_image(data[:cut], 5)
    with pytest.raises(FormatError):
        decode_image(data, 5, (16, 24))


def test_texture_stream_roundtrip(small_tree):
    images = [pack_patches(small_tree, l) for l in small_tree.leaf_levels]
    layouts = [layout_for(small_tree, l) for l in small_tree.leaf_levels]
    raw = encode_texture(images, codec="external-raw")
    got = decode_texture(raw, layouts)
    for l in small_tree.leaf_levels:
        np.testing.assert_allclose(got[l], np.round(small_tree.leaf_set(l).patches * 255) / 255, atol=1e-12)
    dct = encode_texture(images, qt=4)
    assert set(dct.payloads) == set(small_tree.leaf_levels)
    got = decode_texture(dct, layouts)
    for l in small_tree.leaf_levels:
        p = small_tree.leaf_set(l).patches
        assert got[l].shape == p.shape
        assert psnr(got[l], p) > 35


def test_no_cross_slot_bleeding():
    # patches of different constant colors: each decodes to (close to) its own color
    colors = np.random.default_rng(0).uniform(size=(16, 3))
    patches = np.broadcast_to(colors[:, None, None, :], (16, 8, 8, 3)).copy()
    img = pack_array(patches, level=7)
    stream = encode_texture([img], qt=3)
    out = decode_texture(stream, [img])[7]
    assert np.abs(out - patches).max() < 3 * 3 / 8 / 255 + 1e-9


def test_mismatched_layout(small_tree):
    images = [pack_patches(small_tree, l) for l in small_tree.leaf_levels]
    layouts = [layout_for(small_tree, l) for l in small_tree.leaf_levels]
    stream = encode_texture(images, qt=10)
    l0 = small_tree.leaf_levels[0]
    bad = TextureStream(stream.codec, stream.qt, {**stream.payloads, l0: stream.payloads[small_tree.leaf_levels[1]]})
    with pytest.raises(FormatError):
        decode_texture(bad, layouts)
