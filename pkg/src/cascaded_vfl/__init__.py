"""Asynchronous vertical federated learning with zeroth-order clients and a first-order server."""

__version__ = "0.1.0"
