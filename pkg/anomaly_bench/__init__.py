"""Benchmark of unsupervised lesion detectors on brain slices."""

__version__ = "0.1.0"
