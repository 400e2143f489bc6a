"""Representation leakage, gradient inversion and representation-perturbation defense for FedAvg."""

__version__ = "0.1.0"
