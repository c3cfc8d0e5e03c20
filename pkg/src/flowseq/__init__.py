"""Unsupervised anomaly scoring of network flow token sequences."""

__version__ = "0.1.0"
