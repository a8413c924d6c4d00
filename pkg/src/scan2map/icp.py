"""Point-to-Point and Point-to-Plane ICP with Cauchy IRLS weighting.

Each iteration: transform the reading by the current pose, match every
reading point to its nearest reference point, drop pairs farther than
``max_correspondence``, weight the rest with w = 1 / (1 + (r / c)^2), solve
for an increment and left-compose it onto the pose. Iteration stops when the
increment is below both epsilons (converged) or at ``max_iterations``.

Point-to-Plane linearises the increment as a twist xi = (rho, phi) about the
origin of the reference frame. Its residual is n . (a - b), the Jacobian row
is [n, a x n] and the solved twist moves reading points onto the planes
(a point 0.1 m above z = 0 with normal +z gives rho_z = -0.1).
"""

from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass

import numpy as np

from .cloud import DEFAULT_NORMAL_K, NearestTracker, PointCloud, SpatialIndex, estimate_normals
from .errors import DegenerateGeometryError, InvalidArgumentError
from .se3 import Pose, Twist, rotation_angle, se3_exp

DAMPING = 1e-6
MAX_CONDITION = 1e12


class Variant(str, enum.Enum):
    POINT_TO_POINT = "point_to_point"
    POINT_TO_PLANE = "point_to_plane"

    @property
    def short(self) -> str:
        return "ptp" if self is Variant.POINT_TO_POINT else "ptplane"


@dataclass(frozen=True)
class IcpConfig:
    variant: Variant = Variant.POINT_TO_PLANE
    max_correspondence: float = 0.7
    max_iterations: int = 150
    cauchy_scale: float = 0.3
    translation_epsilon: float = 1e-4
    rotation_epsilon: float = 1e-5
    min_correspondences: int = 10
    normal_k: int = DEFAULT_NORMAL_K

    def __post_init__(self) -> None:
        object.__setattr__(self, "variant", Variant(self.variant))
        if not self.max_correspondence > 0:
            raise InvalidArgumentError("max_correspondence must be > 0")
        if self.max_iterations < 1:
            raise InvalidArgumentError("max_iterations must be >= 1")
        if not self.cauchy_scale > 0:
            raise InvalidArgumentError("cauchy_scale must be > 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["variant"] = self.variant.value
        return d


@dataclass(frozen=True)
class IcpResult:
    pose: Pose
    iterations: int
    converged: bool
    final_rms_residual: float
    correspondence_count: int

    def to_dict(self) -> dict:
        return {
            "pose": {
                "matrix": self.pose.matrix().tolist(),
                "translation": self.pose.translation.tolist(),
                "quaternion_xyzw": self.pose.quaternion().tolist(),
            },
            "iterations": self.iterations,
            "converged": self.converged,
            "final_rms_residual": self.final_rms_residual,
            "correspondence_count": self.correspondence_count,
        }


def cauchy_weight(residual, scale: float):
    """1 / (1 + (r / scale)^2); scalar in, scalar out, arrays elementwise."""
    if not scale > 0:
        raise InvalidArgumentError("Cauchy scale must be > 0")
    r = np.asarray(residual, dtype=np.float64) / scale
    w = 1.0 / (1.0 + r * r)
    return float(w) if w.ndim == 0 else w


def solve_point_to_point(a: np.ndarray, b: np.ndarray, w: np.ndarray | None = None) -> Pose:
    """Pose T minimising sum w_i |T a_i - b_i|^2 (weighted Kabsch)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 3)
    w = np.ones(len(a)) if w is None else np.asarray(w, dtype=np.float64).reshape(-1)
    if len(a) < 3 or len(b) != len(a) or len(w) != len(a):
        raise DegenerateGeometryError("point-to-point alignment needs >= 3 matched pairs")
    wsum = float(w.sum())
    if not wsum > 0:
        raise DegenerateGeometryError("total correspondence weight is zero")
    ca = w @ a / wsum
    cb = w @ b / wsum
    ac = a - ca
    bc = b - cb
    h = (ac * w[:, None]).T @ bc
    u, s, vt = np.linalg.svd(h)
    # rotation about the line is free when the weighted source is collinear
    spread = np.linalg.svd((ac * np.sqrt(w)[:, None]), compute_uv=False)
    if spread[0] == 0 or spread[1] <= 1e-12 * spread[0] or s[1] <= 1e-12 * max(s[0], 1e-300):
        raise DegenerateGeometryError("point-to-point pairs are collinear or coincident")
    d = 1.0 if np.linalg.det(vt.T @ u.T) >= 0 else -1.0
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return Pose(r, cb - r @ ca)


def point_to_plane_system(a, b, n, w) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Jacobian rows [n, a x n], residuals n.(a - b) and normalised weights."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 3)
    n = np.asarray(n, dtype=np.float64).reshape(-1, 3)
    w = np.ones(len(a)) if w is None else np.asarray(w, dtype=np.float64).reshape(-1)
    jac = np.hstack([n, np.cross(a, n)])
    res = np.einsum("ij,ij->i", n, a - b)
    wsum = float(w.sum())
    if not wsum > 0:
        raise DegenerateGeometryError("total correspondence weight is zero")
    return jac, res, w / wsum


def solve_point_to_plane(a, b, n, w=None, damping: float = DAMPING) -> Twist:
    """Twist minimising sum w_i (n_i . (exp(xi^) a_i - b_i))^2, linearised.

    Weights are normalised to sum to one and ``damping`` is added to the
    diagonal of the 6x6 normal matrix, so directions the pairs do not
    constrain get a near-zero update instead of a blow-up.
    """
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    if len(a) < 6:
        raise DegenerateGeometryError("point-to-plane alignment needs >= 6 pairs")
    jac, res, wn = point_to_plane_system(a, b, n, w)
    jw = jac * wn[:, None]
    lhs = jw.T @ jac + damping * np.eye(6)
    rhs = jw.T @ res
    if not np.all(np.isfinite(lhs)) or np.linalg.cond(lhs) > MAX_CONDITION:
        raise DegenerateGeometryError("point-to-plane normal equations are singular")
    xi = -np.linalg.solve(lhs, rhs)
    return Twist(xi[:3], xi[3:])


def register(
    reading: PointCloud,
    reference: PointCloud,
    ref_index: SpatialIndex | None = None,
    init: Pose | None = None,
    cfg: IcpConfig | None = None,
) -> IcpResult:
    """Align ``reading`` to ``reference``; returns the reading-to-reference pose."""
    cfg = cfg or IcpConfig()
    pose = init if init is not None else Pose.identity()
    if len(reading) == 0 or len(reference) == 0:
        raise DegenerateGeometryError("reading and reference must be non-empty")
    if ref_index is None:
        ref_index = SpatialIndex(reference)
    plane = cfg.variant is Variant.POINT_TO_PLANE
    if plane and not reference.has_normals:
        reference = estimate_normals(reference, cfg.normal_k, pose.translation, ref_index)

    src = reading.points
    tracker = NearestTracker(ref_index, cfg.max_correspondence)
    converged = False
    residuals = np.zeros(0)
    iterations = 0
    for iterations in range(1, cfg.max_iterations + 1):
        moved = pose.apply(src)
        idx, dist = tracker.query(moved)
        keep = dist <= cfg.max_correspondence
        count = int(keep.sum())
        if count < cfg.min_correspondences:
            raise DegenerateGeometryError(
                f"only {count} correspondences within {cfg.max_correspondence} m "
                f"(need {cfg.min_correspondences})"
            )
        a = moved[keep]
        b = reference.points[idx[keep]]
        if plane:
            n = reference.normals[idx[keep]]
            residuals = np.einsum("ij,ij->i", n, a - b)
            w = cauchy_weight(residuals, cfg.cauchy_scale)
            step = se3_exp(solve_point_to_plane(a, b, n, w))
        else:
            residuals = dist[keep]
            w = cauchy_weight(residuals, cfg.cauchy_scale)
            step = solve_point_to_point(a, b, w)
        pose = (step @ pose).normalized()
        if (
            float(np.linalg.norm(step.translation)) < cfg.translation_epsilon
            and rotation_angle(step.rotation) < cfg.rotation_epsilon
        ):
            converged = True
            break
    rms = math.sqrt(float(np.mean(residuals**2))) if len(residuals) else 0.0
    return IcpResult(pose, iterations, converged, rms, int(len(residuals)))
