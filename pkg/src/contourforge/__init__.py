"""Contour extraction toolkit: tensor engine, segmentation nets, data
pipeline, contour metrics, experiment harness, and annotation service."""

__version__ = "0.1.0"
