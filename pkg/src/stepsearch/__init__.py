"""Hyperparameter search strategies and verification metrics for footstep biometrics."""

__version__ = "0.1.0"
