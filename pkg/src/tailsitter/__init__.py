"""Tail-sitter flight stack: flatness transform, trajectory planning, MPC and simulation."""

__version__ = "0.1.0"
