"""Ladder-network training for speaker embeddings, with verification scoring."""

__version__ = "0.1.0"
