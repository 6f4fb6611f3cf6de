"""Regional solar/wind power estimation from multi-channel surface weather maps."""

__version__ = "0.1.0"
