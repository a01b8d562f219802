from .container import BitstreamHeader, Container, FormatError, parse, serialize
from .morton import morton_decode, morton_encode
from .ply import PlyError, read_ply, write_ply
from .types import (
    FlatSurfels,
    LeafSet,
    LevelNodes,
    OctreeCube,
    PointCloud,
    PreconditionError,
    Surfel,
    SurfelOctree,
    TexturePatch,
    default_patch_sizes,
)
