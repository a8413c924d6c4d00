"""Change quantification between a session cloud and an aligned reference map.

A session point is "new" when its nearest reference point is farther than
the threshold. Around a pose, the change percentage is

    100 * (new session points within the sphere) / (reference points within the sphere)

Only appearance counts; reference points missing from the session do not.
Percentiles use linear interpolation between order statistics
(``numpy.percentile(..., method="linear")``).
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .cloud import PointCloud, SpatialIndex, radius_crop, voxel_downsample
from .errors import EmptyInputError, EmptyReferenceError, InvalidArgumentError, UndefinedRatioError
from .se3 import Pose

DEFAULT_THRESHOLD = 0.3
DEFAULT_RADIUS = 35.0


def detect_changes(session: PointCloud, reference_index: SpatialIndex, threshold: float = DEFAULT_THRESHOLD) -> np.ndarray:
    """Boolean mask of session points farther than ``threshold`` from the reference."""
    if not threshold > 0:
        raise InvalidArgumentError(f"threshold must be > 0, got {threshold}")
    if len(reference_index) == 0:
        raise EmptyReferenceError("reference cloud is empty")
    if len(session) == 0:
        return np.zeros(0, dtype=bool)
    _, dist = reference_index.query(session.points)
    return dist > threshold


def change_percent_at_pose(
    session: PointCloud,
    reference: PointCloud,
    reference_index: SpatialIndex,
    pose: Pose,
    radius: float = DEFAULT_RADIUS,
    threshold: float = DEFAULT_THRESHOLD,
) -> tuple[float, int, int]:
    """(percent, new session points, reference points) inside the sphere at ``pose``."""
    if not radius > 0:
        raise InvalidArgumentError(f"radius must be > 0, got {radius}")
    center = pose.translation
    ref_count = len(radius_crop(reference, center, radius))
    if ref_count == 0:
        raise UndefinedRatioError(f"no reference points within {radius} m of {center.tolist()}")
    local = radius_crop(session, center, radius)
    new = int(detect_changes(local, reference_index, threshold).sum())
    return 100.0 * new / ref_count, new, ref_count


def summarize_changes(values: Iterable[float]) -> dict[str, float]:
    """Median, IQR (p75 - p25) and max, linear-interpolation percentiles."""
    v = np.asarray(list(values), dtype=np.float64)
    if v.size == 0:
        raise EmptyInputError("cannot summarise an empty series")
    p25, p50, p75 = np.percentile(v, [25, 50, 75], method="linear")
    return {"median": float(p50), "iqr": float(p75 - p25), "max": float(v.max())}


@dataclass(frozen=True)
class PoseChange:
    pose_id: str
    change_percent: float
    new_point_count: int
    reference_point_count: int


@dataclass
class ChangeReport:
    per_pose: list[PoseChange]
    summary: dict[str, float] = field(default_factory=dict)
    threshold: float = DEFAULT_THRESHOLD
    radius: float = DEFAULT_RADIUS
    voxel: float | None = None

    def to_dict(self) -> dict:
        return {
            "threshold": self.threshold,
            "radius": self.radius,
            "voxel": self.voxel,
            "per_pose": [asdict(p) for p in self.per_pose],
            "summary": dict(self.summary),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["pose_id", "change_percent", "new_points", "ref_points"])
        for p in self.per_pose:
            writer.writerow([p.pose_id, repr(p.change_percent), p.new_point_count, p.reference_point_count])
        s = self.summary
        writer.writerow(["summary", f"median={s['median']!r}", f"iqr={s['iqr']!r}", f"max={s['max']!r}"])
        return buf.getvalue()

    @classmethod
    def from_dict(cls, d: dict) -> "ChangeReport":
        rows = [PoseChange(**p) for p in d["per_pose"]]
        report = cls(rows, d["summary"], d["threshold"], d["radius"], d.get("voxel"))
        recomputed = summarize_changes(p.change_percent for p in rows)
        if any(abs(recomputed[k] - report.summary[k]) > 1e-12 for k in ("median", "iqr", "max")):
            raise InvalidArgumentError("change report summary does not match its per-pose rows")
        return report


def change_report(
    session: PointCloud,
    reference: PointCloud,
    poses: Sequence[tuple[str, Pose]],
    radius: float = DEFAULT_RADIUS,
    threshold: float = DEFAULT_THRESHOLD,
    voxel: float | None = None,
) -> ChangeReport:
    """Per-pose change percentages plus their summary.

    Both clouds are voxel-filtered first when ``voxel`` is set; off by
    default so a planted point ratio is reported unchanged.
    """
    if voxel:
        session = voxel_downsample(session, voxel)
        reference = voxel_downsample(reference, voxel)
    index = SpatialIndex(reference)
    rows = []
    for pose_id, pose in poses:
        pct, new, ref = change_percent_at_pose(session, reference, index, pose, radius, threshold)
        rows.append(PoseChange(pose_id, pct, new, ref))
    summary = summarize_changes(r.change_percent for r in rows)
    return ChangeReport(rows, summary, threshold, radius, voxel or None)
