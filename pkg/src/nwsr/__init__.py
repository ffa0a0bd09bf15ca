"""Fibre-bundle image reconstruction with trainable Nadaraya-Watson layers."""

__version__ = "0.1.0"
