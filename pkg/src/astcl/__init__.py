"""Hierarchical contrastive pretraining of AST encoders."""

__version__ = "0.1.0"
