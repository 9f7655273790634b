"""Cascaded cGAN pre-segmentation and tissue-interface segmentation for OCT B-scans."""

__version__ = "0.1.0"
