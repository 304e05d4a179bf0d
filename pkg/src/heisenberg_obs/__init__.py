"""Numerical observability toolkit for the heat equation on the Heisenberg group."""

__version__ = "0.1.0"
