"""Few-shot learning pipeline: weight-clustered CNN features + hyperdimensional classifier."""

__version__ = "0.1.0"
