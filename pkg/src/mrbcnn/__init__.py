"""Multi-region bilinear CNN embeddings for person re-identification, in numpy."""

__version__ = "0.1.0"
