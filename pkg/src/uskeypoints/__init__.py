"""Unsupervised keypoint discovery in grayscale video with physics-driven feature maps."""

__version__ = "0.1.0"
