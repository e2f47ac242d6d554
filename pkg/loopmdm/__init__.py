"""loopmdm - looped masked diffusion models at desk scale."""

__version__ = "0.1.0"
