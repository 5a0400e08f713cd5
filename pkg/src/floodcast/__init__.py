"""Rainfall-driven flood forecasting benchmark: simulator, features, models, metric."""

__version__ = "0.1.0"
