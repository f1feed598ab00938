"""Desk-scale depth-guided radiance fields with cascade cost volumes."""

__version__ = "0.1.0"
