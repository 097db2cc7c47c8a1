"""Optimal execution under linear propagator models with in-context operator learning."""

__version__ = "0.1.0"
