"""Desk-scale minimum risk training for SMILES sequence recognition."""

__version__ = "0.1.0"
