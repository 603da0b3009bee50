"""Discrete diffusion captioning on synthetic scenes, trained from scratch in numpy."""
