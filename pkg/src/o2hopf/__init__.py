"""Numerical toolkit for O(2)-equivariant Hopf bifurcation of planar viscous shocks."""

__version__ = "0.1.0"
