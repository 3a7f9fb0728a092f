"""Supervised domain adaptation benchmark for volumetric segmentation.

Source training, cross-domain transfer, layer-selective fine-tuning,
Surface Dice evaluation, gap-closure scoring and sign-test comparison,
plus a synthetic domain-shift generator for desk-scale runs.
"""

__version__ = "0.1.0"
