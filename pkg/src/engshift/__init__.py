"""Engagement shift analysis: count mixed models, changepoint consensus and epoch inference."""

__version__ = "0.1.0"
