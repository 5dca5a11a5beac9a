"""Auxiliary-node assisted pairwise key establishment for mobile sensor networks."""

__version__ = "0.1.0"
