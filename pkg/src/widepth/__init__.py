"""Depth images of moving objects from Wi-Fi CSI with a teacher-student VAE."""
__version__ = "0.1.0"
