"""DVAE-UMOT: unsupervised multi-object tracking with a dynamical VAE."""

__version__ = "1.0.0"
