"""Simulation and control toolkit for a wearable tendon-driven dexterous hand."""

__version__ = "0.1.0"
