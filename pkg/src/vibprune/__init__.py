"""Structured transformer pruning with variational stochastic gates."""

__version__ = "0.1.0"
