"""Numerical toolkit for the phase structure of linearly interacting diffusions
with quadratic noise (the parabolic Anderson model with Brownian noise)."""

__version__ = "0.1.0"
