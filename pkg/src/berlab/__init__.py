"""Binarized networks with activation write errors, and an STT-MRAM write-error model."""

__version__ = "0.1.0"
