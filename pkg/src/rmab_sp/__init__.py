"""Finite-horizon restless bandits: fluid LP, Gaussian stochastic program and N-arm simulation."""

__version__ = "0.1.0"
