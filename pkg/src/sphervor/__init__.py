"""Spherical Voronoi function approximation, fitting, and probe-based shading."""

__version__ = "0.1.0"
