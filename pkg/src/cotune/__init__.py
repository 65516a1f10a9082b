"""Desk-scale laboratory for structure-semantics co-tuning of a learned
image codec: feature adapters, a small hyperprior codec, training
protocols, latent diagnostics, and Bjontegaard rate-accuracy evaluation."""

__version__ = "0.1.0"
