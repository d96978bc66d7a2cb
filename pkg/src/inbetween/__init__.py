"""Keyframe in-betweening: a masked diffusion model for kinematic motion plus
physics-based adaptation of the result onto simulated characters."""

__version__ = "0.1.0"
