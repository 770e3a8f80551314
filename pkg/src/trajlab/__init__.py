"""Goal-conditioned diffusion trajectory prediction with tree sampling."""

__version__ = "0.1.0"
