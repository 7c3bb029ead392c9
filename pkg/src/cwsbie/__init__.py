"""Image and kernel of the surface Biot-Savart operator on toroidal surfaces."""

__version__ = "0.1.0"
