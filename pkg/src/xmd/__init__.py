"""Semantically tolerant, class-balanced cross-modal contrastive distillation."""

__version__ = "0.1.0"
