"""Rate-distortion sweep over tau and Qt on a small sphere, with its convex hull."""

import sys

from teso import make_trajectory, synthetic
from teso.evalkit import convex_hull, rd_sweep, write_csv

cloud = synthetic.sphere(radius=34)
cams = make_trajectory(4, radius=1.0, perturb=0.2, center=cloud.positions.mean(0) + 0.5, width=256, height=256)
points = rd_sweep(cloud, taus=(60, 62, 64, 66), qts=(10, 25, 40), cameras=cams)

print(f"{'tau':>5} {'Qt':>4} {'bpp':>8} {'PSNR':>7}")
for p in sorted(points, key=lambda p: p.bpp):
    print(f"{p.tau:5.0f} {p.qt:4d} {p.bpp:8.3f} {p.psnr:7.2f}")
print("hull:", ", ".join(f"({p.tau:g},{p.qt})" for p in convex_hull(points)))
if len(sys.argv) > 1:
    write_csv(points, sys.argv[1])
