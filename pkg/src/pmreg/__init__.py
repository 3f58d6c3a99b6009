"""Particle methods with spline regularization on unfitted Cartesian grids."""

__version__ = "0.1.0"
