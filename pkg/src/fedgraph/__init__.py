"""Federated graph clustering with private structural graphs and DP prototypes."""

__version__ = "0.1.0"
