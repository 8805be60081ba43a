"""Shape and spectral reflectance recovery from a concentric multi-spectral light field.

Cameras sit on concentric rings, every ring filtered to one narrow band and
lit by one matching light on an outer ring.  The package renders such light
fields, estimates depth by a plane sweep over multi-spectral surface cameras,
separates specular lobes, solves multi-spectral photometric stereo and
integrates the normals into a surface.
"""

from .rig import RigConfig
from .spectral import SpectralModel, build_spectral_model, dense_reflectance
from .scene import Material, Mesh, Scene, Sphere
from .renderer import LightField, render_lightfield
from .surface import ReconstructOptions, SurfaceEstimate, reconstruct

__version__ = "0.1.0"

__all__ = [
    "LightField", "Material", "Mesh", "ReconstructOptions", "RigConfig", "Scene",
    "SpectralModel", "Sphere", "SurfaceEstimate", "build_spectral_model",
    "dense_reflectance", "reconstruct", "render_lightfield",
]
