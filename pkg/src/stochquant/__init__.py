"""Stochastic quantization toolkit: field generation, sign-fluctuating
trajectory ensembles and their statistical verification."""

__version__ = "0.1.0"
