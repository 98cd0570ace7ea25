"""Tri-directional implicit function toolkit."""

__version__ = "0.1.0"
