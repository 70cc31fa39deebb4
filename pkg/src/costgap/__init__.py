"""Coding-cost-gap detector of synthetic images built on a learned lossless image model."""

__version__ = "0.1.0"
