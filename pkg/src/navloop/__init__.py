"""Closed-loop perception / decision / reasoning navigation learning."""

__version__ = "0.1.0"
