"""Dual-scale operator workbench for 2D turbulence forecasting."""

__version__ = "0.1.0"
