from dataclasses import dataclass


@dataclass(frozen=True)
class RasterConstants:
    alpha_max: float = 0.99
    alpha_min: float = 1.0 / 255.0
    t_min: float = 1e-4
    # squared Mahalanobis radius beyond which a fragment contributes nothing (3 sigma)
    cutoff: float = 9.0
    tile: int = 16


RASTER = RasterConstants()
