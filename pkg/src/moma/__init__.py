"""Divide-and-Modulate video adapters on a frozen image transformer, in float64 numpy."""

__version__ = "0.1.0"
