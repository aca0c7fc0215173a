"""Feature-map quality scoring and evaluation toolkit."""

__version__ = "0.1.0"
