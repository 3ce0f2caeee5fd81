"""Planning and simulation for hybrid expert-parallel MoE training across data centers."""

__version__ = "0.1.0"
