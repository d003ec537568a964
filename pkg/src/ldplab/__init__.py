"""Numerical laboratory for small-time large deviations of locally monotone SPDEs."""

__version__ = "0.1.0"
