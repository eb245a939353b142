"""Synthetic 3D nodule-shape generation with an autoencoder and a
statistical acceptance filter."""

__version__ = "0.1.0"
