"""Photonic tensor flow processor simulator, kernel compiler and CNN runtime."""

__version__ = "0.1.0"
