"""Robust federated variational inference over Gaussian factors."""

__version__ = "0.1.0"
