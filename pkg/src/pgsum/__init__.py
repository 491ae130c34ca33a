"""Pointer-generator summarization with coverage, built on a small numpy autodiff engine."""

__version__ = "0.1.0"
