"""Desk-scale few-shot learning lab: StyleMix, spatial attention, cross-domain stylization and contrastive pseudo-labels."""
__version__ = "0.1.0"
