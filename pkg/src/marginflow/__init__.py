"""Implicit bias of constant-step SGD on homogeneous networks: training,
margin dynamics and criticality of the normalized iterates."""

__version__ = "0.1.0"
