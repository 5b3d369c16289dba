"""Hierarchical lattice-partitioned piecewise GLMs."""

__version__ = "0.1.0"
