"""Local instrumental-variable estimation with unordered multi-valued treatments."""

__version__ = "0.1.0"
