"""Coupled profile/frontal GAN embedding trainer and verification harness."""

__version__ = "0.1.0"
