"""Hybrid architecture search with cell re-aggregation."""

__version__ = "0.1.0"
