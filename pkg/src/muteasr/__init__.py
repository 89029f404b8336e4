"""Desk-scale attention encoder-decoder transcription with text-regularized decoder training."""

__version__ = "0.1.0"
