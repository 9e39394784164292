"""Two-branch scene-text super-resolution with recognizer-driven semantic guidance."""

__version__ = "0.1.0"
