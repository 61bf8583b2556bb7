"""Federated-unlearning audit lab: federated training, unlearning, gradient-difference
proofs, the inversion attack against them, and defenses."""

__version__ = "0.1.0"
