import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from teso.core.morton import (
    FACE_OFFSETS,
    count_present,
    morton_decode,
    morton_encode,
    neighbor_codes,
    slot_index,
    slot_position,
)


def naive_interleave(x, y, z, level):
    code = 0
    for b in range(level - 1, -1, -1):
        digit = (((x >> b) & 1) << 2) | (((y >> b) & 1) << 1) | ((z >> b) & 1)
        code = (code << 3) | digit
    return code


def test_examples():
    assert morton_encode((0, 0, 0), 2) == 0
    assert morton_encode((1, 1, 1), 1) == 7
    assert morton_encode((3, 1, 2), 2) == naive_interleave(3, 1, 2, 2) == 46


def test_out_of_range():
    with pytest.raises(ValueError):
        morton_encode((4, 0, 0), 2)
    with pytest.raises(ValueError):
        morton_encode((0, -1, 0), 2)
    with pytest.raises(ValueError):
        morton_encode((0, 0, 0), 22)


@given(st.integers(0, 21).flatmap(
    lambda l: st.tuples(st.just(l), st.tuples(*[st.integers(0, (1 << l) - 1)] * 3))))
def test_roundtrip(args):
    level, c = args
    code = morton_encode(c, level)
    assert code == naive_interleave(*c, level)
    assert morton_decode(code, level) == c


def test_vectorized_matches_scalar(rng):
    c = rng.integers(0, 1 << 10, size=(500, 3))
    codes = morton_encode(c, 10)
    assert [naive_interleave(*map(int, row), 10) for row in c] == codes.tolist()
    np.testing.assert_array_equal(morton_decode(codes, 10), c)


def test_sibling_order():
    kids = [morton_encode((x, y, z), 1) for x in (0, 1) for y in (0, 1) for z in (0, 1)]
    assert kids == list(range(8))
    parent = morton_encode((5, 2, 7), 3)
    child = [morton_encode((10 + x, 4 + y, 14 + z), 4) for x in (0, 1) for y in (0, 1) for z in (0, 1)]
    assert child == [parent * 8 + k for k in range(8)]


def test_neighbors_and_count():
    codes = morton_encode(np.array([[0, 0, 0], [1, 0, 0], [3, 3, 3]]), 2)
    nb, valid = neighbor_codes(codes, 2, FACE_OFFSETS)
    assert valid.sum(axis=1).tolist() == [3, 4, 3]
    s = np.sort(codes)
    assert count_present(nb, valid, s).tolist() == [1, 1, 0]


@given(st.integers(0, 2**20 - 1))
def test_slot_bijection(k):
    col, row = slot_position(k)
    assert slot_index(col, row) == k


def test_slot_example():
    assert slot_position(3) == (1, 1)
    assert slot_position(1) == (1, 0)
    assert slot_position(2) == (0, 1)
