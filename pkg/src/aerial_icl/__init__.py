"""Incremental-class semantic segmentation for aerial imagery.

Background-unbiased cross-entropy and distillation plus orientation
invariance regularizers, with tiling, synthetic data, training and
evaluation utilities.
"""

__version__ = "0.1.0"
