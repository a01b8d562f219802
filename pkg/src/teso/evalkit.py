"""Geometry and image distortion metrics and the rate-distortion sweep."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.spatial import cKDTree

from .core.types import PointCloud, PreconditionError

log = logging.getLogger(__name__)

SSIM_SIGMA = 1.5
SSIM_RADIUS = 5  # 11 x 11 window
SSIM_K1, SSIM_K2 = 0.01, 0.03


def _points(x) -> np.ndarray:
    return np.asarray(x.positions if isinstance(x, PointCloud) else x, dtype=np.float64).reshape(-1, 3)


def d1_mse(a, b) -> float:
    """Symmetric point-to-point MSE: the larger of the two one-sided means."""
    A, B = _points(a), _points(b)
    if len(A) == 0 or len(B) == 0:
        raise PreconditionError("d1 needs two non-empty point sets")
    dab, _ = cKDTree(B).query(A, k=1)
    dba, _ = cKDTree(A).query(B, k=1)
    return float(max(np.mean(dab ** 2), np.mean(dba ** 2)))


def psnr_from_mse(mse: float, peak: float) -> float:
    return math.inf if mse <= 0 else 10.0 * math.log10(peak * peak / mse)


def d1_psnr(a, b, peak: float | None = None) -> float:
    """Symmetric D1-PSNR in dB; ``peak`` defaults to ``2**depth - 1`` for clouds."""
    if peak is None:
        if not isinstance(a, PointCloud):
            raise PreconditionError("peak is required for raw point arrays")
        peak = float((1 << a.depth) - 1)
    return psnr_from_mse(d1_mse(a, b), peak)


def _check_images(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise PreconditionError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def image_psnr(a, b, peak: float = 1.0) -> float:
    a, b = _check_images(a, b)
    return psnr_from_mse(float(np.mean((a - b) ** 2)), peak)


def image_ssim(a, b, data_range: float = 1.0) -> float:
    """Mean SSIM with an 11x11 Gaussian window (sigma 1.5), averaged over channels.

    Statistics use the full window at every pixel (zero-padding free: the
    borders are excluded as in the reference formulation).
    """
    a, b = _check_images(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    trunc = SSIM_RADIUS / SSIM_SIGMA
    vals = []
    for ch in range(a.shape[2]):
        x, y = a[..., ch], b[..., ch]
        f = lambda z: gaussian_filter(z, SSIM_SIGMA, truncate=trunc, mode="reflect")
        mx, my = f(x), f(y)
        sxx = f(x * x) - mx * mx
        syy = f(y * y) - my * my
        sxy = f(x * y) - mx * my
        # unbiased covariance, matching the common reference implementation
        n = (2 * SSIM_RADIUS + 1) ** 2
        cov = n / (n - 1.0)
        sxx, syy, sxy = sxx * cov, syy * cov, sxy * cov
        s = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))
        r = SSIM_RADIUS
        vals.append(s[r:-r, r:-r].mean() if s.shape[0] > 2 * r and s.shape[1] > 2 * r else s.mean())
    return float(np.mean(vals))


# --------------------------------------------------------------------------- R-D sweep


@dataclass(frozen=True)
class RDPoint:
    tau: float
    qt: int
    codec: str
    geometry_bits: int
    texture_bits: int
    bpp: float
    psnr: float
    ssim: float

    @property
    def distortion(self) -> float:
        return 1.0 - self.ssim


def convex_hull(points: list[RDPoint]) -> list[RDPoint]:
    """Lower-left Pareto staircase over (bpp, 1 - SSIM), sorted by bpp."""
    pts = sorted(points, key=lambda p: (p.bpp, p.distortion))
    hull = []
    best = math.inf
    for p in pts:
        if p.distortion < best:
            hull.append(p)
            best = p.distortion
    return hull


def reference_images(cloud: PointCloud, cameras, levels=None, background=(0.0, 0.0, 0.0), K: int = 3):
    """Renders of an unquantized TeSO with every leaf at the finest level."""
    from .builder import BuildConfig, build_teso
    from .renderer import render
    from .texture import sample_patches

    cfg = BuildConfig.for_depth(cloud.depth) if levels is None else BuildConfig(leaf_levels=tuple(levels))
    finest = cfg.leaf_levels[-1]
    ref_cfg = BuildConfig(leaf_levels=(finest,), tau=cfg.tau, patch_sizes={finest: cfg.sizes()[finest]})
    tree = sample_patches(build_teso(cloud, ref_cfg), cloud, K=K)
    return [render(tree, cam, background) for cam in cameras]


def rd_sweep(cloud: PointCloud, taus=(60.0, 62.0, 64.0, 66.0), qts=(10, 25, 40), cameras=None,
             codec: str = "internal-dct", levels=None, reference=None, background=(0.0, 0.0, 0.0)) -> list[RDPoint]:
    """Encode, decode and render ``cloud`` for every (tau, Qt) pair.

    Distortion is measured against ``reference`` images (default:
    :func:`reference_images`) averaged over ``cameras``.
    """
    from .pipeline import EncoderSettings, decode_teso, encode_teso
    from .renderer import make_trajectory, render

    if cloud.normals is None:
        from .builder import estimate_normals

        cloud = estimate_normals(cloud)
    if cameras is None:
        cameras = make_trajectory(8, center=cloud.positions.mean(axis=0) + 0.5, width=256, height=256)
    if reference is None:
        reference = reference_images(cloud, cameras, levels, background)
    qts_eff = list(qts) if codec == "internal-dct" else [0]
    out = []
    for tau in taus:
        settings = EncoderSettings(tau=float(tau), levels=levels, texture_codec=codec)
        cache = None
        for qt in qts_eff:
            data, report = encode_teso(cloud, settings.with_qt(qt), cache=cache)
            cache = report.cache
            tree = decode_teso(data)
            imgs = [render(tree, cam, background) for cam in cameras]
            psnr = float(np.mean([image_psnr(i, r) for i, r in zip(imgs, reference)]))
            ssim = float(np.mean([image_ssim(i, r) for i, r in zip(imgs, reference)]))
            bits = 8 * len(data)
            out.append(RDPoint(float(tau), int(qt), codec, report.geometry_bits, report.texture_bits,
                               bits / len(cloud), psnr, ssim))
            log.info("tau=%g qt=%d bpp=%.4f psnr=%.2f ssim=%.4f", tau, qt, out[-1].bpp, psnr, ssim)
    return out


CSV_FIELDS = ("tau", "qt", "codec", "geometry_bits", "texture_bits", "bpp", "psnr", "ssim")


def write_csv(points: list[RDPoint], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        w.writeheader()
        for p in points:
            w.writerow({k: v for k, v in asdict(p).items() if k in CSV_FIELDS})


def read_csv(path) -> list[RDPoint]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    conv = dict(tau=float, qt=int, codec=str, geometry_bits=int, texture_bits=int, bpp=float, psnr=float, ssim=float)
    return [RDPoint(**{k: conv[k](r[k]) for k in CSV_FIELDS}) for r in rows]
