"""Time-delayed adaptive-robust control of uncertain Euler-Lagrange systems."""

__version__ = "0.1.0"
