"""Numerical laboratory for sub-Riemannian geometry on charts and finite truncations."""

__version__ = "0.1.0"
