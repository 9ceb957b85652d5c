"""Federated seq2point load disaggregation."""

__version__ = "0.1.0"
