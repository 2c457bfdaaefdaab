"""Generative recommendation with graph-smoothed embeddings, balanced
residual quantization, and stepwise latent-reasoning decoding."""

__version__ = "0.1.0"
