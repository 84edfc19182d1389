"""Adversarial multi-level domain alignment for toy cross-domain detection."""

__version__ = "0.1.0"
