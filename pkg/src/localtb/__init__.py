"""Numerical instruments for the random-grid proof of the local Tb theorem."""

__version__ = "0.1.0"
