"""Tri-branch gated-fusion retrieval engine over precomputed embeddings."""

__version__ = "0.1.0"
