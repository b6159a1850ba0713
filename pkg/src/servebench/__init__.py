"""Serving benchmark harness for reasoning LLMs, with a built-in engine simulator."""

__version__ = "0.1.0"
