"""Anatomy-relative ICE transducer pose regression on synthetic phantoms.

numpy-only reverse-mode autodiff, SE(3) utilities, an SDF heart phantom with
sector-scan rendering, a seeded on-disk dataset, a small Vision Transformer
regressor with Adam training and Table-style evaluation, plus OBJ scene export.
"""

from .errors import (
    ConfigError,
    ContractError,
    DegeneracyError,
    DimensionError,
    DivergenceError,
    FormatError,
    IcePoseError,
    NonFiniteError,
)
from .geometry import Pose, RigidTransform, decode_rot6d, denormalize_pose, encode_rot6d, normalize_pose
from .tensor import Tensor

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "ContractError",
    "DegeneracyError",
    "DimensionError",
    "DivergenceError",
    "FormatError",
    "IcePoseError",
    "NonFiniteError",
    "Pose",
    "RigidTransform",
    "Tensor",
    "decode_rot6d",
    "denormalize_pose",
    "encode_rot6d",
    "normalize_pose",
]
