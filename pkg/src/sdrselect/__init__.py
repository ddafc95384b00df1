"""Stepwise dual ranking (SDR) for offline behavioral data selection."""

__version__ = "0.1.0"
