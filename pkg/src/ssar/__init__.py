"""Sliding-window dependency graphs and diffusion-convolutional forecasting for vector time series."""

__version__ = "0.1.0"
