"""Uncertainty decomposition and input sensitivity for Bayesian neural networks with latent inputs."""

__version__ = "0.1.0"
