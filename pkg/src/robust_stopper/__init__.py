"""Robust optimal stopping under dynamic convex risk measures on a binomial lattice."""

__version__ = "0.1.0"
