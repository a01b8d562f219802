"""Attribute bits under the three context modes of the geometry coder."""

from teso import BuildConfig, build_teso, quantize_tree, synthetic
from teso.geocodec.codec import GeometryCodecConfig, encode_geometry, geometry_bits

trees = {"plane-cut": quantize_tree(synthetic.plane_cut_tree())}
for name, cloud in (("torus", synthetic.torus(60_000)), ("sphere", synthetic.sphere(60_000))):
    trees[name] = quantize_tree(build_teso(cloud, BuildConfig(tau=66)))

for name, tree in trees.items():
    print(f"{name} ({tree.n_leaves} leaves)")
    for mode in ("none", "offset", "offset_normal"):
        b = geometry_bits(encode_geometry(tree, GeometryCodecConfig(mode)))
        print(f"  {mode:14s} offset {b['offset']:7d}  normal {b['normal']:7d}  radius {b['radius']:7d}")
