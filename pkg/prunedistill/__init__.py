"""Prune a trained network, size a dense student from what survived, distill into it."""

__version__ = "0.1.0"
