"""Hyper-reduced computational homogenization of parameterized elasto-plastic RVEs."""

__version__ = "0.1.0"
