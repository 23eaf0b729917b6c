"""Learned latent priors for conditional normalizing-flow super-resolution."""

__version__ = "0.1.0"
