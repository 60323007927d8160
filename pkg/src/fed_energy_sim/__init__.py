"""Deterministic simulator for federated learning with intermittent energy arrivals."""

__version__ = "0.1.0"
