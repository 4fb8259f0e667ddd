"""Consensus shift over a multi-task graph of dense scene views."""

__version__ = "0.1.0"
