"""Score-driven dynamic factor correlation models."""
__version__ = "0.1.0"
