"""Generative replay for continual anomaly detection on a synthetic benchmark."""

__version__ = "0.1.0"
