"""Self-supervised S4 representations for single-lead ECG."""

__version__ = "0.1.0"
