"""Offline cooperative multi-agent RL with implicit global-to-local value regularization."""

__version__ = "0.1.0"
