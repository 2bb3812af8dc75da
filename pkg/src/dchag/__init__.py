"""Desk-scale simulator and cost model for channel-distributed ViT training."""

__version__ = "0.1.0"
