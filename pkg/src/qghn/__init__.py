"""Quantization-aware graph hypernetworks: predict parameters for low-bit CNNs."""

__version__ = "0.1.0"
