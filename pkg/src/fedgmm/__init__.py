"""Federated Gaussian mixture modelling: one-shot aggregation, distributed EM and experiment tooling."""

__version__ = "0.1.0"
