"""Continual-learning traffic forecasting on expanding sensor networks."""

__version__ = "0.1.0"
