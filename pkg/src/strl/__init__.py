"""Spatial-temporal reinforcement-learning routing on a packet-network simulator."""

__version__ = "0.1.0"
