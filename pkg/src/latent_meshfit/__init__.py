"""latent-meshfit - textured mesh reconstruction by latent-space inversion."""

__version__ = "0.1.0"
