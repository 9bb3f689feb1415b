"""Simulation toolkit for negative federated learning: detection of client
divergence on the server and recovery through dual-model training."""

__version__ = "0.1.0"
