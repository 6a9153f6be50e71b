"""Foresight pruning: score, prune and train neural networks at initialization."""

__version__ = "0.1.0"
