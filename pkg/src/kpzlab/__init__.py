"""Numerical laboratory for weak KPZ universality with a general even nonlinearity."""

__version__ = "0.1.0"
