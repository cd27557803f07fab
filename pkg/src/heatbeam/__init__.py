"""Numerical laboratory for a heat equation coupled to a damped beam on a periodic channel."""

__version__ = "0.1.0"
