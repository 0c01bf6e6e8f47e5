"""Branching Brownian motion among sparse soft obstacles: simulation and PDE oracles."""
__version__ = "0.1.0"
