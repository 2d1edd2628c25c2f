"""Noise-assisted excitation transport in small networks and the FMO complex."""
