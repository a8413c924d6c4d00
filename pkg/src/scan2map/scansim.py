"""Projected lidar scans from a dense map with point-based occlusion.

Map points are moved into the sensor frame and binned by (channel,
azimuth). Each bin keeps only its closest point (a spherical depth buffer),
then drops it if it is out of range, too high, or too far off the bin's
centre ray. Returned points are map points expressed in the sensor frame;
nothing is interpolated.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .cloud import PointCloud
from .errors import EmptyMapError, InvalidArgumentError
from .se3 import Pose


@dataclass(frozen=True)
class BeamModel:
    channels: int = 32
    azimuth_steps: int = 900
    elevation_min: float = math.radians(-25.0)
    elevation_max: float = math.atan2(15.0, 30.0)
    max_range: float = 30.0
    max_height: float = 15.0
    angular_tolerance: float = 0.5 * (math.atan2(15.0, 30.0) - math.radians(-25.0)) / 31

    def __post_init__(self) -> None:
        if self.channels < 1 or self.azimuth_steps < 1:
            raise InvalidArgumentError("channels and azimuth_steps must be >= 1")
        if not self.elevation_min < self.elevation_max:
            raise InvalidArgumentError("elevation_min must be below elevation_max")
        if not self.max_range > 0:
            raise InvalidArgumentError("max_range must be > 0")
        if not self.angular_tolerance > 0:
            raise InvalidArgumentError("angular_tolerance must be > 0")

    @property
    def channel_spacing(self) -> float:
        if self.channels == 1:
            return self.elevation_max - self.elevation_min
        return (self.elevation_max - self.elevation_min) / (self.channels - 1)

    @property
    def azimuth_step(self) -> float:
        return 2.0 * math.pi / self.azimuth_steps

    def channel_elevations(self) -> np.ndarray:
        if self.channels == 1:
            return np.array([0.5 * (self.elevation_min + self.elevation_max)])
        return self.elevation_min + self.channel_spacing * np.arange(self.channels)

    @property
    def ray_count(self) -> int:
        return self.channels * self.azimuth_steps

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "BeamModel":
        return cls(**d)


def default_beam_model() -> BeamModel:
    """32 channels over [-25 deg, atan(15/30)], 0.4 deg azimuth, 30 m / 15 m reach."""
    return BeamModel()


def bin_points(local: np.ndarray, model: BeamModel) -> tuple[np.ndarray, np.ndarray]:
    """Flat bin id (channel * azimuth_steps + azimuth) per sensor-frame point, -1 if outside.

    Also returns each point's range.
    """
    x, y, z = local[:, 0], local[:, 1], local[:, 2]
    horiz = np.hypot(x, y)
    rng = np.sqrt(x * x + y * y + z * z)
    az = np.arctan2(y, x)
    el = np.arctan2(z, horiz)
    az_bin = np.rint(az / model.azimuth_step).astype(np.int64) % model.azimuth_steps
    if model.channels == 1:
        ch = np.where((el >= model.elevation_min) & (el <= model.elevation_max), 0, -1)
    else:
        ch = np.rint((el - model.elevation_min) / model.channel_spacing).astype(np.int64)
    valid = (ch >= 0) & (ch < model.channels) & (rng > 0)
    bins = np.where(valid, ch * model.azimuth_steps + az_bin, -1)
    return bins, rng


def bin_center_rays(bins: np.ndarray, model: BeamModel) -> np.ndarray:
    ch = bins // model.azimuth_steps
    az = (bins % model.azimuth_steps) * model.azimuth_step
    el = model.channel_elevations()[ch]
    return np.column_stack([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])


def project_scan(map_cloud: PointCloud, sensor_pose: Pose, model: BeamModel | None = None) -> PointCloud:
    """Sensor-frame scan of ``map_cloud`` seen from ``sensor_pose``, ordered by bin."""
    model = model or default_beam_model()
    if len(map_cloud) == 0:
        raise EmptyMapError("cannot project a scan from an empty map")
    selected = select_returns(map_cloud, sensor_pose, model)
    local = sensor_pose.inverse().apply(map_cloud.points[selected])
    return PointCloud(local, check=False)


def select_returns(map_cloud: PointCloud, sensor_pose: Pose, model: BeamModel) -> np.ndarray:
    """Map-point indices that produce a return, in bin order."""
    local = sensor_pose.inverse().apply(map_cloud.points)
    bins, rng = bin_points(local, model)
    cand = np.flatnonzero(bins >= 0)
    if len(cand) == 0:
        return cand
    # sort by (bin, range, index); first of each bin is the depth-buffer winner
    order = np.lexsort((cand, rng[cand], bins[cand]))
    cand = cand[order]
    b = bins[cand]
    first = np.ones(len(cand), dtype=bool)
    first[1:] = b[1:] != b[:-1]
    win = cand[first]
    wbins = bins[win]
    keep = (rng[win] <= model.max_range) & (local[win, 2] <= model.max_height)
    rays = bin_center_rays(wbins, model)
    p = local[win]
    cross = np.linalg.norm(np.cross(p, rays), axis=1)
    dot = np.einsum("ij,ij->i", p, rays)
    keep &= np.arctan2(cross, dot) <= model.angular_tolerance
    return win[keep]
