"""Conditional density estimation with hypernetwork-generated continuous normalizing flows."""

__version__ = "0.1.0"
