"""Unbiased incremental TBPTT for memory-enhanced segment-recurrent models."""

__version__ = "0.1.0"
