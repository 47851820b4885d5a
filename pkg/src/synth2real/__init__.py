"""Zero-shot adaptation of synthetic face renders by latent search in a style-based generator."""

__version__ = "0.1.0"
