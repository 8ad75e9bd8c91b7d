"""Latent action models under exogenous noise: data, models, metrics, checks."""

__version__ = "0.1.0"
