"""Spuriousness-aware episodic meta-learning over caption-derived attributes."""

__version__ = "0.1.0"
