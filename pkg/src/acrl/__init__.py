"""Reinforcement learning with actively learned reward models standing in for a costly oracle."""

__version__ = "0.1.0"
