"""Debloat ML shared libraries: drop unused GPU code elements and CPU functions by zeroing them."""

__version__ = "0.1.0"
