"""Koopman-based model predictive frequency control of a flywheel storage unit."""

__version__ = "0.1.0"
