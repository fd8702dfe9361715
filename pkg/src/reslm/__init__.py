"""Residual language model fusion for encoder-decoder speech recognition, on numpy."""

__version__ = "0.1.0"
