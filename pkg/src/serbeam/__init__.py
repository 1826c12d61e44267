"""SER-driven hybrid beamforming: descent, deep unfolding, link-level harness."""

__version__ = "0.1.0"
