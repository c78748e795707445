"""Few-shot generator adaption with cross-domain structural consistency, at toy scale."""

__version__ = "0.1.0"
