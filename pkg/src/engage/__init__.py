"""Social-signal detection and latent-character engagement recognition."""

__version__ = "0.1.0"
