"""Self-supervised point-cloud pre-training with segment grouping and prototype distillation."""

from .errors import (ConfigError, DimensionError, EmptyInputError, NumericError, ParseError,
                     PreconditionError, SegProtoError)
from .pointcloud import PointCloud, load_ply, make_cloud, write_ply

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "DimensionError", "EmptyInputError", "NumericError", "ParseError",
    "PreconditionError", "SegProtoError", "PointCloud", "load_ply", "make_cloud", "write_ply",
]
