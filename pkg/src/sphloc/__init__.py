"""Multi-source localization with spherical microphone arrays.

Steered response power density (SRPD) maps are refined on a nested HEALPix
grid guided by spatial entropy, then segmented to count and localize sources.
"""
from .sph import (ArrayGeometry, IllConditionedError, PlaneWaveSource, ShdFrame,
                  default_geometry, load_geometry, plane_wave_shd, shd_from_mics, srp_pwd)
from .healpix import HealpixNode
from .srpd import CrossDensityCache, cd_cache

__version__ = "0.1.0"
