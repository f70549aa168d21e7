"""Contact-guided joint reconstruction of a 3D human and object from a single raster."""

__version__ = "0.1.0"
