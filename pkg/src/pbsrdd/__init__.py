"""Particle-based reaction-drift-diffusion: lattice jump process, mean-field solver and oracles."""

__version__ = "0.1.0"
