"""Adversarial motif-based graph-convolutional social recommendation."""

__version__ = "0.1.0"
