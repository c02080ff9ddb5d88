"""Barcode detection in ultra-high-resolution images.

Region proposal on a 256x256 thumbnail, Y-Net segmentation on fixed-size
crops, and morphological box extraction, plus a synthetic data generator and
COCO-style evaluation.
"""

__version__ = "0.1.0"
