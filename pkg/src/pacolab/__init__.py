"""Pairwise-consistency reward modelling and multi-reward GRPO on a synthetic signal world."""

__version__ = "0.1.0"
