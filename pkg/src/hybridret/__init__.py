"""Contrastive cross-language code retrieval at desk scale."""

__version__ = "0.1.0"
