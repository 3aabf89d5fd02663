"""Decoupled adversarial patches against person detectors."""
__version__ = "0.1.0"
