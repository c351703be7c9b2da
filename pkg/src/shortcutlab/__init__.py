"""Shortcut-learning mitigation with a synthetic source domain and factorized representations."""

__version__ = "0.1.0"
