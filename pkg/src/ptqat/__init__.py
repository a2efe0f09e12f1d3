"""Hybrid post-training / quantization-aware training with layer pre-check."""

__version__ = "0.1.0"
