"""Stochastic approximation under decision-dependent distributions."""

__version__ = "0.1.0"
