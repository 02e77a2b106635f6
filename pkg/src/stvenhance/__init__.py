"""Generative space-time video enhancement at desk scale.

A frozen 3D-UNet video prior plus a trainable video ControlNet that upsamples
low-frame-rate, low-resolution clips in space and time.
"""

__version__ = "0.1.0"
