"""Distributional policy gradients with an adversarial return-distribution
model and information-gain curiosity."""

__version__ = "0.1.0"
