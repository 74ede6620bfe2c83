"""Long-term temporal convolutions for video action recognition, in numpy."""

__version__ = "0.1.0"
