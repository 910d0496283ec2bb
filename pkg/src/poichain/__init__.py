"""Proof-of-Integrity blockchain on emulated TPMs, with a deterministic network simulator."""

__version__ = "0.1.0"
