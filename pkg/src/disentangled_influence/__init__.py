"""Indirect influence audits through disentangled representations."""

__version__ = "0.1.0"
