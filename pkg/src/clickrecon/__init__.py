"""Photon-number statistics from multiplexed click detectors."""

__version__ = "0.1.0"
