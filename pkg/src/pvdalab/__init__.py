"""Calibrated multi-modal adversarial training for partial video domain adaptation."""

__version__ = "0.1.0"
