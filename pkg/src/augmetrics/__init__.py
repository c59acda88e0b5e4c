"""Quantify data augmentation policies by Affinity and Diversity."""

__version__ = "0.1.0"
