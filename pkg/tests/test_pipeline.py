import os

import numpy as np
import pytest

from teso import EncoderSettings, container_info, decode_teso, encode_teso, read_ply
from teso.core.container import FormatError, parse
from teso.geocodec.rangecoder import StreamError
from teso.quant import quantize_tree
from teso.texture import sample_patches

DATA = os.path.join(os.path.dirname(__file__), "data")


def test_roundtrip_and_accounting(small_sphere):
    data, rep = encode_teso(small_sphere, EncoderSettings(tau=64, qt=10))
    tree = decode_teso(data)
    assert tree.same_geometry(rep.tree)
    assert rep.total_bytes == len(data)
    assert rep.geometry_bits + rep.texture_bits + rep.header_bits == 8 * len(data)
    assert rep.header_bits > 0
    assert rep.bpp == pytest.approx(8 * len(data) / len(small_sphere))
    assert sum(v for k, v in rep.breakdown.items() if k != "texture") == rep.geometry_bits
    info = container_info(data)
    assert info["total_bytes"] == len(data) and info["n_points"] == len(small_sphere)
    assert 8 * sum(info["section_bytes"].values()) == rep.geometry_bits + rep.texture_bits
    for l in tree.leaf_levels:
        p = tree.leaf_set(l).patches
        assert p.shape[1:] == (tree.patch_sizes[l],) * 2 + (3,)


def test_cache_reuse_is_identical(small_sphere):
    s = EncoderSettings(tau=62)
    d10, rep = encode_teso(small_sphere, s.with_qt(10))
    d40, _ = encode_teso(small_sphere, s.with_qt(40), cache=rep.cache)
    fresh, _ = encode_teso(small_sphere, s.with_qt(40))
    assert d40 == fresh
    assert len(d40) < len(d10)


def test_patches_sampled_on_quantized_geometry(small_sphere):
    _, rep = encode_teso(small_sphere, EncoderSettings(tau=64, texture_codec="external-raw"))
    tree = decode_teso(encode_teso(small_sphere, EncoderSettings(tau=64, texture_codec="external-raw"))[0])
    ref = sample_patches(rep.tree, small_sphere)
    for l in tree.leaf_levels:
        np.testing.assert_allclose(tree.leaf_set(l).patches, np.round(ref.leaf_set(l).patches * 255) / 255,
                                   atol=1e-12)


def test_geometry_only(small_sphere):
    data, rep = encode_teso(small_sphere, EncoderSettings(tau=60, texture_codec="none"))
    assert rep.texture_bits == 0
    tree = decode_teso(data)
    assert not tree.has_patches
    assert container_info(data)["texture_codec"] == 0


def test_corrupt_container(small_sphere):
    data, _ = encode_teso(small_sphere, EncoderSettings(tau=60))
    with pytest.raises(FormatError):
        decode_teso(b"XESO" + data[4:])
    rng = np.random.default_rng(0)
    for _ in range(60):
        b = bytearray(data)
        i = int(rng.integers(0, len(b)))
        b[i] ^= 0xFF
        try:
            t = decode_teso(bytes(b))
        except (FormatError, StreamError):
            continue
        t.validate()


def test_golden_fixture():
    """The checked-in bitstream decodes, and re-encoding its source reproduces it byte for byte."""
    import sys

    sys.path.insert(0, DATA)
    from make_golden import SETTINGS

    golden = open(os.path.join(DATA, "golden.teso"), "rb").read()
    c = parse(golden)
    assert golden[:4] == b"TESO"
    assert (c.header.depth, c.header.l_min, c.header.l_max) == (10, 6, 8)
    cloud = read_ply(os.path.join(DATA, "golden.ply"), depth=10)
    data, _ = encode_teso(cloud, SETTINGS)
    assert data == golden
    tree = decode_teso(golden)
    assert tree.n_leaves == 84
    assert tree.same_geometry(quantize_tree(tree))
