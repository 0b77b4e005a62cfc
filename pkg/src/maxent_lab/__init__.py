"""Entropy-regularised policy training and robustness/complexity measurements
on noisy chaotic control benchmarks (Lorenz-63, Kuramoto-Sivashinsky)."""

__version__ = "0.1.0"
