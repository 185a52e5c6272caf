"""Selective self-supervised self-training for single-class detection on synthetic scenes."""

__version__ = "0.1.0"
