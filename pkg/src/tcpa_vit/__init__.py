"""Token-coordinated prompt attention on a small frozen Vision Transformer."""

__version__ = "0.1.0"
