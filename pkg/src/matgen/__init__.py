"""Multi-condition latent diffusion for SVBRDF material maps at desk scale."""

from matgen.material import MaterialMaps, MAP_NAMES

__version__ = "0.1.0"

__all__ = ["MaterialMaps", "MAP_NAMES", "__version__"]
