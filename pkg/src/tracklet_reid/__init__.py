"""Unsupervised tracklet-association re-identification on synthetic cameras."""

__version__ = "0.1.0"
