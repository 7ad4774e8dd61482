"""Dual reconstruction-network image decomposition for one-class anomaly detection."""

__version__ = "0.1.0"
