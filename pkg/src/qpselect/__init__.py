"""Bayesian variable selection with quasi-likelihoods."""

__version__ = "0.1.0"
