"""Ensemble-based uncertainty quantification and ensemble distillation for binary segmentation."""

__version__ = "0.1.0"
