"""Attention-guided heterogeneous diffusion purification at desk scale."""

__version__ = "0.1.0"
