"""Encode a synthetic sphere, decode it and render one view.

Run from the repository root::

    python3 gallery/quickstart.py out/
"""

import sys
from pathlib import Path

import numpy as np

from teso import Camera, EncoderSettings, decode_teso, encode_teso, render, synthetic
from teso.renderer import save_png

out = Path(sys.argv[1] if len(sys.argv) > 1 else "gallery_out")
out.mkdir(parents=True, exist_ok=True)

cloud = synthetic.sphere(50_000)
data, report = encode_teso(cloud, EncoderSettings(tau=64, qt=15))
(out / "sphere.teso").write_bytes(data)
print(f"{report.n_points} points -> {report.total_bytes} bytes ({report.bpp:.3f} bpp)")
for k, v in report.breakdown.items():
    print(f"  {k:10s} {v:8d} bits")

tree = decode_teso(data)
c = cloud.positions.mean(0)
cam = Camera(c + np.array([150.0, 60.0, 180.0]), c, width=512, height=512, fov=45)
save_png(render(tree, cam, background=(1, 1, 1)), out / "sphere.png")
print("wrote", out / "sphere.png")
