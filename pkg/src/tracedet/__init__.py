"""Hallucination detection for diffusion language models from denoising
entropy traces, with a masked-diffusion trace simulator."""

__version__ = "0.1.0"
