"""Bayesian optimization of neural-network MPC cost functions on a linearized cart-pole."""

__version__ = "0.1.0"
