"""Joint denoising and 2x super-resolution for grayscale microscopy images."""

__version__ = "0.1.0"
