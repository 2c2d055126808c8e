"""Optimal exercise of American options on a Brownian bridge pinned at the strike."""

__version__ = "0.1.0"
