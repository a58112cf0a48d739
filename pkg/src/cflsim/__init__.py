"""Clustered federated learning simulator with missing-modality mitigation."""

__version__ = "0.1.0"
