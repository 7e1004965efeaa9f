"""Character-conditioned story generation with per-sentence action and emotion control."""

__version__ = "0.1.0"
