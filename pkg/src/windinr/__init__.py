"""Latent-state implicit wind-field representation with observation-guided
latent correction and a synthetic-truth evaluation harness."""

__version__ = "0.1.0"
