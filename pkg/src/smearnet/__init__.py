"""Compact CNN pathogen detector for microscopy patches: training, k-means
weight sharing, sliding-window detection, evaluation and benchmarking."""

__version__ = "0.1.0"
