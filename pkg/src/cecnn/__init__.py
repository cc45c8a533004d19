"""Copula-enhanced CNNs for joint regression/classification at desk scale."""

__version__ = "0.1.0"
