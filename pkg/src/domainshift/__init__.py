"""Domain-adaptation toolkit for spectral cutting-sound classification."""

__version__ = "0.1.0"
