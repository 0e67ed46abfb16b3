"""Adversarial-transformation defense and the attacks used to stress it."""

__version__ = "0.1.0"
