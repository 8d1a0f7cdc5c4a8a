"""Partially personalized federated learning by operator root-finding."""

__version__ = "0.1.0"
