"""Separating-then-adapting training for open-set domain-adaptive segmentation, at toy scale."""

__version__ = "0.1.0"
