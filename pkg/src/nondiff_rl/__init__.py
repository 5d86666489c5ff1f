"""Reinforcement learning on plain NumPy with hand-written gradients."""

__version__ = "0.1.0"
