"""Explain Ethereum transactions from their traces and token flows."""

__version__ = "0.1.0"
