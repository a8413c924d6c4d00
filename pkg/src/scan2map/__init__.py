"""Lidar scan-to-map relocalization benchmark: SE(3) perturbation, projected
scans, Point-to-Point / Point-to-Plane ICP and change quantification."""

from .cloud import NoiseSpec, PointCloud, SpatialIndex, add_noise, estimate_normals, nearest_neighbor, radius_crop, voxel_downsample
from .errors import Scan2MapError
from .icp import IcpConfig, IcpResult, Variant, cauchy_weight, register, solve_point_to_plane, solve_point_to_point
from .rng import Rng
from .scansim import BeamModel, default_beam_model, project_scan
from .se3 import (
    PerturbationSpec,
    Pose,
    Twist,
    perturb_pose,
    rotation_error,
    sample_perturbation,
    se3_exp,
    se3_log,
    translation_error,
)

__version__ = "0.1.0"
