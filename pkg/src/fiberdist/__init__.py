"""Multi-fiber direction estimation, smoothing and tracking for diffusion MRI."""

from .errors import (ChecksumError, ConvergenceError, DesignError, DimensionError,
                     FiberDistError, GradientNormError, InputError, StageError)
from .geometry import Axis, geodesic_distance, icosphere_axes, weighted_karcher_mean
from .signal import GradientScheme, TensorComponent, VoxelModel, VoxelSignal
from .smoothing import DirectionField, SmoothingConfig, smooth_field
from .tracking import TrackerConfig, Tract, VoxelGrid, track_all
from .voxel_fit import FitConfig, VoxelEstimate, estimate_voxel, fit_volume

__version__ = "0.1.0"

__all__ = [
    "Axis",
    "ChecksumError",
    "ConvergenceError",
    "DesignError",
    "DimensionError",
    "DirectionField",
    "FiberDistError",
    "FitConfig",
    "GradientNormError",
    "GradientScheme",
    "InputError",
    "SmoothingConfig",
    "StageError",
    "TensorComponent",
    "TrackerConfig",
    "Tract",
    "VoxelEstimate",
    "VoxelGrid",
    "VoxelModel",
    "VoxelSignal",
    "estimate_voxel",
    "fit_volume",
    "geodesic_distance",
    "icosphere_axes",
    "smooth_field",
    "track_all",
    "weighted_karcher_mean",
]
