"""Invisible watermarking of neural radiance fields through their training views."""

__version__ = "0.1.0"
