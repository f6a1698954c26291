"""Synthetic data, file formats, metrics and the command-line interface."""
