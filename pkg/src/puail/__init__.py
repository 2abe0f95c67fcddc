"""Positive-unlabeled adversarial imitation learning on tabular MDPs."""

__version__ = "0.1.0"
