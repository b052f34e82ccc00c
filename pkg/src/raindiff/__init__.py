"""raindiff: unsupervised image deraining via cycle-generated pseudo-pairs
and patch-fused conditional denoising diffusion."""

__version__ = "0.1.0"
