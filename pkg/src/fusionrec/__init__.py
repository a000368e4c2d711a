"""Multimodal fusion recommenders with a reproducible benchmark harness."""

__version__ = "0.1.0"
