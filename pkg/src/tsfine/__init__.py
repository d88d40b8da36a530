"""Simulation-driven two-stage parameter estimation with OOD-triggered fine-tuning."""

__version__ = "0.1.0"
