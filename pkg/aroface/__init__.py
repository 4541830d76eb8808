"""Adversarial alignment-robust face recognition training on a toy numpy stack."""

__version__ = "0.1.0"
