"""Feature-quantized GAN training laboratory on synthetic 2-D data."""

__version__ = "0.1.0"
