"""Bayesian multivariate log-Gaussian Cox process models for multi-type point patterns."""

__version__ = "0.1.0"
