"""Conditional diffusion and score-based samplers for paired image translation."""

__version__ = "0.1.0"
