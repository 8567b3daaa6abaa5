"""Spherical U-Net: icosahedral meshes, DiNe convolution and spherical CNN models on numpy."""

from . import autodiff, dataio, icosphere, layers, models, neighborhood, symmetry, training
from .icosphere import IcoSphere, generate, vertex_count
from .models import ModelSpec, build
from .neighborhood import Hierarchy, NeighborTable, build_dine_table

__version__ = "0.1.0"

__all__ = [
    "autodiff",
    "dataio",
    "icosphere",
    "layers",
    "models",
    "neighborhood",
    "symmetry",
    "training",
    "IcoSphere",
    "generate",
    "vertex_count",
    "ModelSpec",
    "build",
    "Hierarchy",
    "NeighborTable",
    "build_dine_table",
]
