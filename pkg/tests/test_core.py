import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from teso.core import (
    BitstreamHeader,
    FormatError,
    LeafSet,
    OctreeCube,
    PointCloud,
    PreconditionError,
    Surfel,
    SurfelOctree,
    TexturePatch,
    parse,
    read_ply,
    serialize,
    write_ply,
)
from teso.core.container import SECTION_ATTRIBUTES, SECTION_BASE, section_id, section_kind
from teso.core.ply import PlyError

# --------------------------------------------------------------------------- types


def test_pointcloud_invariants():
    PointCloud(10, np.zeros((1, 3)), np.zeros((1, 3)))
    with pytest.raises(PreconditionError):
        PointCloud(10, [[1024.0, 0, 0]], [[0, 0, 0]])
    with pytest.raises(PreconditionError):
        PointCloud(10, [[-0.5, 0, 0]], [[0, 0, 0]])
    with pytest.raises(PreconditionError):
        PointCloud(10, [[0, 0, 0]], [[1.5, 0, 0]])
    with pytest.raises(PreconditionError):
        PointCloud(10, [[0, 0, 0]], [[0, 0, 0]], normals=[[0, 0, 2.0]])
    c = PointCloud(10, [[0, 0, 0]], [[0, 0, 0]], normals=[[0, 0, 1.0]])
    assert c.has_normals and len(c) == 1
    with pytest.raises(ValueError):
        c.positions[0, 0] = 3.0  # frozen


def test_cube_geometry():
    c = OctreeCube(6, (1, 2, 3), 10)
    assert c.width == 16.0
    np.testing.assert_array_equal(c.anchor, [16, 32, 48])
    assert OctreeCube.from_code(c.code, 6, 10) == c
    with pytest.raises(PreconditionError):
        OctreeCube(2, (4, 0, 0), 10)


def test_surfel_check():
    Surfel(np.array([1.0, 2, 3]), np.array([0, 0, 1.0]), 3.0).check(4.0)
    with pytest.raises(PreconditionError):
        Surfel(np.array([4.0, 0, 0]), np.array([0, 0, 1.0]), 1.0).check(4.0)
    with pytest.raises(PreconditionError):
        Surfel(np.array([1.0, 0, 0]), np.array([0, 0, 1.0]), 3.5).check(4.0)
    with pytest.raises(PreconditionError):
        TexturePatch(np.zeros((4, 3, 3)))


def _tiny_tree():
    codes = np.array([0, 1, 8 * 7 + 3])
    leaves = {2: LeafSet(codes, np.full((3, 3), 100.0), np.tile([0, 0, 1.0], (3, 1)), np.full(3, 50.0))}
    return SurfelOctree.from_leaves(10, (1, 2), {1: 8, 2: 4}, leaves)


def test_tree_structure():
    t = _tiny_tree()
    t.validate()
    assert t.sigma == 256.0
    assert t.nodes[1].codes.tolist() == [0, 7]
    assert not t.nodes[1].leaf.any()
    assert t.node_state(2, (0, 0, 1)) == "leaf"
    assert t.node_state(1, (0, 0, 0)) == "split"
    assert t.node_state(1, (0, 1, 0)) is None
    assert t.n_leaves == 3
    assert t.same_geometry(t, quantized=False)


def test_tree_rejects_overlap():
    leaves = {1: LeafSet(np.array([0]), np.zeros((1, 3)), [[0, 0, 1.0]], [1.0]),
              2: LeafSet(np.array([3]), np.zeros((1, 3)), [[0, 0, 1.0]], [1.0])}
    with pytest.raises(PreconditionError):
        SurfelOctree.from_leaves(10, (1, 2), {1: 8, 2: 4}, leaves)


def test_empty_tree():
    t = SurfelOctree.empty(10, (6, 7, 8))
    t.validate()
    assert t.is_empty and t.n_leaves == 0


# --------------------------------------------------------------------------- ply


def test_ply_ascii_example(tmp_path):
    p = tmp_path / "one.ply"
    p.write_text("ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\n"
                 "property float z\nproperty uchar red\nproperty uchar green\nproperty uchar blue\n"
                 "end_header\n0 0 0 255 0 0\n")
    c = read_ply(p)
    assert len(c) == 1
    np.testing.assert_array_equal(c.colors, [[1.0, 0, 0]])
    assert c.normals is None


def _random_cloud(rng, n=1000, normals=True):
    pos = rng.integers(0, 1024, size=(n, 3)).astype(np.float64)
    col = rng.integers(0, 256, size=(n, 3)) / 255.0
    nrm = None
    if normals:
        nrm = rng.normal(size=(n, 3))
        nrm = (nrm / np.linalg.norm(nrm, axis=1, keepdims=True)).astype(np.float32).astype(np.float64)
        nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    return PointCloud(10, pos, col, nrm)


def test_ply_binary_byte_roundtrip(tmp_path, rng):
    a, b = tmp_path / "a.ply", tmp_path / "b.ply"
    write_ply(_random_cloud(rng), a)
    write_ply(read_ply(a, depth=10), b)
    assert a.read_bytes() == b.read_bytes()


@pytest.mark.parametrize("binary", [True, False])
def test_ply_roundtrip_fields(tmp_path, rng, binary):
    c = _random_cloud(rng, 200)
    p = tmp_path / "c.ply"
    write_ply(c, p, binary=binary)
    d = read_ply(p, depth=10)
    np.testing.assert_array_equal(d.positions, c.positions)
    np.testing.assert_array_equal(d.colors, c.colors)
    np.testing.assert_allclose(d.normals, c.normals, atol=1e-7 if binary else 1e-6)


@pytest.mark.parametrize("text,msg", [
    ("plx\n", "magic"),
    ("ply\nformat binary_big_endian 1.0\nelement vertex 0\nend_header\n", "unsupported format"),
    ("ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nend_header\n0\n", "lacks property"),
    ("ply\nformat ascii 1.0\nproperty float x\nend_header\n", "line 3"),
])
def test_ply_errors(tmp_path, text, msg):
    p = tmp_path / "bad.ply"
    p.write_text(text)
    with pytest.raises(PlyError, match=msg):
        read_ply(p)


def test_ply_truncated_binary(tmp_path, rng):
    p = tmp_path / "t.ply"
    write_ply(_random_cloud(rng, 10), p)
    p.write_bytes(p.read_bytes()[:-5])
    with pytest.raises(PlyError, match="offset"):
        read_ply(p)


# --------------------------------------------------------------------------- container


def _header(**kw):
    base = dict(depth=10, leaf_levels=(6, 7, 8), patch_sizes={6: 12, 7: 8, 8: 4}, tau=66.0, n_points=5)
    base.update(kw)
    return BitstreamHeader(**base)


def test_container_zero_sections():
    h = _header()
    data = serialize(h, {})
    assert len(data) == h.fixed_size()
    c = parse(data)
    assert c.header == h and c.sections == {}


def test_container_two_sections():
    h = _header()
    s = {section_id(SECTION_BASE): b"a" * 10, section_id(SECTION_ATTRIBUTES, 7): b"b" * 20}
    data = serialize(h, s)
    assert len(data) == h.fixed_size() + 2 * 10 + 30
    c = parse(data)
    assert c.sections == s
    assert c.section(SECTION_ATTRIBUTES, 7) == b"b" * 20
    assert section_kind(section_id(SECTION_ATTRIBUTES, 7)) == (SECTION_ATTRIBUTES, 7)


def test_container_unknown_section_kept():
    s = {0x7F05: b"future", section_id(SECTION_BASE): b"x"}
    assert parse(serialize(_header(), s)).sections == s


def test_container_errors():
    data = serialize(_header(), {1: b"abc"})
    with pytest.raises(FormatError, match="magic"):
        parse(b"XXXX" + data[4:])
    with pytest.raises(FormatError, match="version"):
        parse(data[:4] + struct.pack("<H", 99) + data[6:])
    with pytest.raises(FormatError, match="trailing"):
        parse(data + b"z")
    with pytest.raises(FormatError, match="duplicate"):
        serialize(_header(), [(1, b"a"), (1, b"b")])


@given(st.data())
def test_container_truncation_fuzz(data):
    payload = serialize(_header(), {1: b"abcdef", 0x205: b"0123456789"})
    cut = data.draw(st.integers(0, len(payload) - 1))
    with pytest.raises(FormatError):
        parse(payload[:cut])


@given(st.dictionaries(st.integers(0, 0xFFFF), st.binary(max_size=40), max_size=6),
       st.floats(0, 100, allow_nan=False), st.integers(0, 63))
def test_container_roundtrip_property(sections, tau, qt):
    h = _header(tau=tau, qt=qt)
    c = parse(serialize(h, sections))
    assert c.header == h and c.sections == sections
