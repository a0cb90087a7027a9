"""Referring-expression grounding over object graphs with guided attention."""

__version__ = "0.1.0"
