"""Cooperative relaying and priced MDP scheduling for multi-user video uplinks."""

__version__ = "0.1.0"
