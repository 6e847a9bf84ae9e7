"""Causal contextual bandits for incremental marketing targeting."""

__version__ = "0.1.0"
