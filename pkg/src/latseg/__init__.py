"""latseg: a desk-scale lab for single-step latent-diffusion segmentation."""

__version__ = "0.1.0"
