"""Coupled 3D-1D water-exchange simulator for unsaturated soil and growing root networks."""

__version__ = "0.1.0"
