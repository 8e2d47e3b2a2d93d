"""Support-sample based personalized speech intelligibility prediction."""

__version__ = "0.1.0"
