"""Simulator of template-poisoning attacks on self-updating biometric verification."""

__version__ = "0.1.0"
