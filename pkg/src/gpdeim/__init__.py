"""Gradient-preserving symplectic model reduction with adaptive DEIM."""

__version__ = "0.1.0"
