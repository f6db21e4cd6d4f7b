"""Recovering private environment dynamics from black-box RL policies."""

__version__ = "0.1.0"
