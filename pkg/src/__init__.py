"""Bounding-box watermarking toolkit: trigger selection, response poisoning,
ownership verification and an extraction-attack simulator."""

__version__ = "0.1.0"
