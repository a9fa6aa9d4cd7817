"""Desk-scale expert-mixing architecture search: Switch-FFN models, surrogate-guided search, fairness metrics and expert pruning."""

__version__ = "0.1.0"
