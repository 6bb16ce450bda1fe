"""Simulator and optimal-control toolkit for a saturable-filter circuit-QED chain."""

__version__ = "0.1.0"
