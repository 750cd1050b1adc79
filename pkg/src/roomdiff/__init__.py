"""Sparse cascaded diffusion for room-scale TSDF generation and refinement."""

from .grids import GridExtent, OccupancyMask, SparseVolume

__version__ = "0.1.0"

__all__ = ["GridExtent", "OccupancyMask", "SparseVolume", "__version__"]
