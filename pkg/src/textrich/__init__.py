"""Desk-scale text-rich image-to-text model: autograd core, model, data, training, metrics."""

__version__ = "0.1.0"
