"""Detection and tracking of moving objects from LiDAR via BEV optical flow."""

from .bev_grid import BevGrid, GridSpec, rasterize, remove_ground
from .errors import AlignmentError, ConfigError, DataError, DatmoError

__version__ = "0.1.0"

__all__ = [
    "AlignmentError",
    "BevGrid",
    "ConfigError",
    "DataError",
    "DatmoError",
    "GridSpec",
    "rasterize",
    "remove_ground",
]
