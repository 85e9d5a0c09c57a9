"""Imagine-and-align navigation on procedurally generated semantic worlds."""

__version__ = "0.1.0"
