"""Ensemble-uncertainty decision rules for safe DAgger on an inverted pendulum."""

__version__ = "0.1.0"
