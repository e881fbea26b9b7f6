"""Differentially private autoregressive synthetic tabular data toolkit."""

__version__ = "0.1.0"
