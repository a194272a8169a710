"""Sparse estimation of the precision-mean vector and its quadratic functional."""

__version__ = "0.1.0"
