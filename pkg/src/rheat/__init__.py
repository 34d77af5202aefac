"""Rough heat equation solver in mild form on the torus."""

__version__ = "0.1.0"

from . import algebra, convrp, dynamics, semigroup, signal  # noqa: F401
