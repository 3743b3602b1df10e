"""EM-based guided policy search for a noisy point-mass task."""

__version__ = "0.1.0"
