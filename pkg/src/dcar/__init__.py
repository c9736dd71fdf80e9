"""Dynamic chunk-wise autoregressive decoding on a synthetic token world."""

__version__ = "0.1.0"
