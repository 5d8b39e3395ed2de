"""Schema-guided structured entity extraction for telecom text."""

__version__ = "0.1.0"
