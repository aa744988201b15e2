"""Targeted-caption and targeted-keyword attacks on a toy image captioner."""

__version__ = "0.1.0"
