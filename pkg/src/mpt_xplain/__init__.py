"""Model-agnostic minimum-variance explanations for malware detectors."""

__version__ = "0.1.0"
