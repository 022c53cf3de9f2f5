"""Adaptive spherical wavelets via graph-attention lifting on icosahedral meshes."""

__version__ = "0.1.0"
