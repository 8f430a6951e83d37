"""Change detection from frozen denoising-diffusion features."""
__version__ = "0.1.0"
