"""Heliostat digital-twin toolkit.

Simulates flux-density images from parametric mirror surfaces via
Monte-Carlo raytracing, generates domain-randomized synthetic training
data, trains an inverse surface-reconstruction model, and evaluates
surface and flux prediction quality.
"""

__version__ = "0.1.0"
