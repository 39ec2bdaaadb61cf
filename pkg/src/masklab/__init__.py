"""Desk-scale masked-language-model pre-training laboratory."""

__version__ = "0.1.0"
