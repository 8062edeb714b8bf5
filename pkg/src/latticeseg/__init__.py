"""Differentiable sparse permutohedral lattices and the segmentation networks built on them."""
from .config import ModelConfig
from .data import PointCloud, load_cloud, save_cloud, save_labels, synthesize
from .errors import ConfigError, InvalidInputError, LatticeError, NonFiniteError, ParseError, SchemaError
from .lattice import ScaledCloud, SparseLattice, build_lattice, elevate
from .network import build_model, prepare, predict, train

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "InvalidInputError", "LatticeError", "ModelConfig", "NonFiniteError", "ParseError",
    "PointCloud", "ScaledCloud", "SchemaError", "SparseLattice", "build_lattice", "build_model", "elevate",
    "load_cloud", "predict", "prepare", "save_cloud", "save_labels", "synthesize", "train",
]
