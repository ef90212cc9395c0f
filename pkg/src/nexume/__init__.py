"""Simulation and training toolkit for neural networks on intermittent, harvested power."""

__version__ = "0.1.0"
