"""Zernike-basis convolution on triangle meshes."""

__version__ = "0.1.0"
