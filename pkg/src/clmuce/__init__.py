"""Contrastive-feature multi-user channel estimation lab."""

__version__ = "0.1.0"
