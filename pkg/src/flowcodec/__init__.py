"""Invertible wavelet-coupling image codec with a learned entropy model."""

__version__ = "0.1.0"
