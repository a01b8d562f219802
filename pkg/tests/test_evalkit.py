import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from teso.core.types import PointCloud, PreconditionError
from teso.evalkit import (
    RDPoint,
    convex_hull,
    d1_psnr,
    image_psnr,
    image_ssim,
    rd_sweep,
    read_csv,
    write_csv,
)


def test_d1_examples(rng):
    pts = rng.integers(0, 1000, size=(500, 3)).astype(float) * 3
    cloud = PointCloud(12, pts / 4, np.zeros_like(pts))
    assert d1_psnr(pts, pts, peak=1023) == math.inf
    assert d1_psnr(pts, pts + [1, 0, 0], peak=1023) == pytest.approx(60.1975, abs=1e-4)
    assert d1_psnr(pts, pts + [0, 2, 0], peak=1023) == pytest.approx(54.1769, abs=1e-4)
    assert d1_psnr(cloud, cloud) == math.inf
    with pytest.raises(PreconditionError):
        d1_psnr(pts, np.zeros((0, 3)), peak=1)


@given(st.integers(0, 2**32 - 1))
def test_d1_symmetric_and_monotone(seed):
    rng = np.random.default_rng(seed)
    a = rng.uniform(0, 100, (60, 3))
    b = rng.uniform(0, 100, (45, 3))
    assert d1_psnr(a, b, 1023) == d1_psnr(b, a, 1023)
    d = rng.normal(size=3)
    d /= np.linalg.norm(d)
    vals = [d1_psnr(a, a + s * d, 1023) for s in (0.25, 0.5, 1.0)]
    assert vals[0] >= vals[1] >= vals[2]


def test_image_examples(rng):
    a = rng.uniform(0.1, 0.9, size=(32, 32, 3))
    assert image_psnr(a, a) == math.inf
    assert image_ssim(a, a) == pytest.approx(1.0)
    assert image_psnr(a, a + 1 / 255) == pytest.approx(20 * math.log10(255), abs=1e-6)
    binary = (rng.uniform(size=(48, 48, 3)) > 0.5).astype(float)
    assert image_ssim(binary, 1 - binary) <= 0
    with pytest.raises(PreconditionError):
        image_psnr(a, a[:-1])


@given(st.integers(0, 2**32 - 1))
def test_ssim_matches_scikit_image(seed):
    from skimage.metrics import structural_similarity

    rng = np.random.default_rng(seed)
    a = rng.uniform(size=(40, 37, 3))
    b = np.clip(a + rng.normal(scale=rng.uniform(0.01, 0.3), size=a.shape), 0, 1)
    want = structural_similarity(a, b, gaussian_weights=True, sigma=1.5, use_sample_covariance=True,
                                 data_range=1.0, channel_axis=-1)
    assert image_ssim(a, b) == pytest.approx(want, abs=1e-9)


def rp(bpp, ssim, tau=60, qt=10):
    return RDPoint(tau, qt, "internal-dct", 1, 1, bpp, 30.0, ssim)


def test_hull_examples():
    p = rp(1.0, 0.9)
    assert convex_hull([p]) == [p]
    pts = [rp(1.0, 0.90), rp(2.0, 0.85), rp(2.5, 0.95), rp(0.5, 0.80), rp(3.0, 0.95)]
    hull = convex_hull(pts)
    assert [h.bpp for h in hull] == [0.5, 1.0, 2.5]
    assert all(a.distortion > b.distortion for a, b in zip(hull, hull[1:]))


@given(st.lists(st.tuples(st.floats(0.01, 10), st.floats(0, 1)), min_size=1, max_size=30))
def test_hull_is_pareto(pairs):
    pts = [rp(b, s) for b, s in pairs]
    hull = convex_hull(pts)
    assert [h.bpp for h in hull] == sorted(h.bpp for h in hull)
    for q in pts:  # nothing on the hull is dominated
        for h in hull:
            assert not (q.bpp <= h.bpp and q.distortion < h.distortion and (q.bpp, q.distortion) != (h.bpp, h.distortion))


def test_csv_roundtrip(tmp_path):
    pts = [rp(1.25, 0.9, 62, 25), rp(0.5, 0.7, 66, 40)]
    write_csv(pts, tmp_path / "rd.csv")
    assert read_csv(tmp_path / "rd.csv") == pts
    assert (tmp_path / "rd.csv").read_text().splitlines()[0] == "tau,qt,codec,geometry_bits,texture_bits,bpp,psnr,ssim"


def test_rd_sweep_direction(small_sphere):
    from teso.renderer import make_trajectory

    c = small_sphere.positions.mean(0) + 0.5
    cams = make_trajectory(2, radius=0.4, perturb=0.05, center=c, width=64, height=64)
    pts = rd_sweep(small_sphere, taus=(60, 66), qts=(10, 40), cameras=cams)
    by = {(p.tau, p.qt): p for p in pts}
    for qt in (10, 40):
        assert by[60, qt].bpp < by[66, qt].bpp
    for tau in (60, 66):
        assert by[tau, 40].texture_bits < by[tau, 10].texture_bits
        assert by[tau, 40].geometry_bits == by[tau, 10].geometry_bits
    assert all(p.bpp > 0 and -1 <= p.ssim <= 1 for p in pts)
