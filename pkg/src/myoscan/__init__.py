"""Myocardial texture pipeline: segment, encode, cluster, classify."""

__version__ = "0.1.0"
