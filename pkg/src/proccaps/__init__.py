"""Progressive capsule colourisation of luminance-only underwater images."""

__version__ = "0.1.0"
