"""Stochastic approximation of Gaussian-process score equations."""
