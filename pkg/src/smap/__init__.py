"""Sparse masked attention policies on procedurally generated gridworlds."""

__version__ = "0.1.0"
