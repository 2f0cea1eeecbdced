"""Unsupervised multi-domain ultrasound artifact removal toolkit."""

__version__ = "0.1.0"
