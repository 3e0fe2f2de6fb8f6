"""Diffusion-completed, counterfactually debiased multimodal recommendation."""

__version__ = "0.1.0"
