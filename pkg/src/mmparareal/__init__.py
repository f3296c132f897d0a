"""Two-level parallel-in-time solver for channel flow past a cylinder."""

__version__ = "0.1.0"
