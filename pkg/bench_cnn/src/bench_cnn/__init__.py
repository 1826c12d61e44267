"""Composite-CNN benchmark for hybrid beamforming on the SER objective."""

__version__ = "0.1.0"
