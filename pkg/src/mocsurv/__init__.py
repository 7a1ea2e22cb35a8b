"""Multimodal object-level contrast training for survival risk prediction."""

__version__ = "0.1.0"
