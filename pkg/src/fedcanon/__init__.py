"""Composite federated optimization with a single server-side proximal step per round."""

__version__ = "0.1.0"
