"""featinv: feature-inversion attacks on split neural networks."""

__version__ = "0.1.0"
