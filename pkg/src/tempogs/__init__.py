"""Cross-temporal Gaussian splatting scene updates."""

__version__ = "0.1.0"
