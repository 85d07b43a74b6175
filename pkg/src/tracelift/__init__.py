"""Trace-driven binary debloating for the MiniISA toy machine."""

__version__ = "0.1.0"
