"""Asymmetric distribution measures for metric-based few-shot classification."""

__version__ = "0.1.0"
