"""Incremental semantic segmentation at desk scale.

A small vision-transformer segmenter, the unbiased incremental losses,
patch-similarity distillation and diagnostics, and a CLI for reproducible
toy-scale experiments.
"""

__version__ = "0.1.0"
