"""Low-rank tensor autoregression - Main module."""

from .cli import app, main

__all__ = ["app", "main"]
