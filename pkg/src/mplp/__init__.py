"""Two-stage prompt learning for emotion recognition in conversation, on a from-scratch numpy stack."""

__version__ = "0.1.0"
