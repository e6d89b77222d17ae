"""CTC-driven dynamic compression of encoder states for speech-to-text models."""

__version__ = "0.1.0"
