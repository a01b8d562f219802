"""Textured surfel octrees for colored point clouds.

Build an octree of cube-bounded surfels with texture patches from a point
cloud, code it into a compact bitstream, decode it and ray-cast it.

>>> from teso import synthetic, encode_teso, decode_teso
>>> data, report = encode_teso(synthetic.sphere(20_000))      # doctest: +SKIP
>>> tree = decode_teso(data)                                   # doctest: +SKIP
"""

import warnings

# old system TBB builds: numba falls back to another threading layer on its own
warnings.filterwarnings("ignore", message="The TBB threading layer")

from .builder import BuildConfig, build_teso, estimate_normals
from .core import (
    BitstreamHeader,
    FormatError,
    OctreeCube,
    PointCloud,
    PreconditionError,
    Surfel,
    SurfelOctree,
    TexturePatch,
    read_ply,
    write_ply,
)
from .pipeline import EncoderSettings, container_info, decode_teso, encode_teso
from .quant import quantize_tree
from .renderer import Camera, make_trajectory, render
from .texture import sample_patches

__version__ = "0.1.0"
