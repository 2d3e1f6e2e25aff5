"""fpdlab: a desk-scale masked-diffusion distillation laboratory."""

__version__ = "0.1.0"
