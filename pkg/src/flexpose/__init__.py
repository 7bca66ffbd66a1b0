"""Few-shot pose distribution adaptation with a style-modulated pose generator."""

__version__ = "0.1.0"
