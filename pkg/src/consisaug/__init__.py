"""Flip-consistency student/teacher training for anchor-based detectors."""

__version__ = "0.1.0"
