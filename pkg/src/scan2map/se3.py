"""Rigid-body pose algebra on SE(3).

Conventions:
    * A Pose (C, t) maps points x to C @ x + t. Registration poses map the
      reading (sensor) frame into the reference (map) frame.
    * Twists are ordered (rho, phi): translational part first, then the
      rotation vector. ``se3_exp`` follows the closed form
      exp(xi^) = [[exp(phi^), J(phi) rho], [0, 1]] with J the left Jacobian.
    * Perturbations compose on the left: T_init = exp(xi^) T_gt.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import BranchAmbiguityError, InvalidArgumentError
from .rng import Rng

SMALL_ANGLE = 1e-8
# Below this distance from pi the rotation axis sign is ambiguous.
PI_MARGIN = 1e-6

# loose enough for quaternion and CSV round-trips, tight enough to catch non-rotations
ORTHO_TOL = 1e-6

DEFAULT_SIGMA = (0.1, 0.1, 0.1, 0.09, 0.09, 0.09)


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


def hat3(v: np.ndarray) -> np.ndarray:
    """Skew-symmetric matrix of a 3-vector."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def vee3(m: np.ndarray) -> np.ndarray:
    return np.array([m[2, 1], m[0, 2], m[1, 0]])


@dataclass(frozen=True)
class Twist:
    rho: np.ndarray = field(default_factory=lambda: np.zeros(3))
    phi: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self) -> None:
        object.__setattr__(self, "rho", _frozen(np.reshape(self.rho, 3)))
        object.__setattr__(self, "phi", _frozen(np.reshape(self.phi, 3)))

    @classmethod
    def from_vector(cls, xi: Iterable[float]) -> "Twist":
        xi = np.asarray(list(xi) if not isinstance(xi, np.ndarray) else xi, dtype=np.float64)
        if xi.shape != (6,):
            raise InvalidArgumentError(f"twist must have 6 components, got shape {xi.shape}")
        return cls(xi[:3], xi[3:])

    def vector(self) -> np.ndarray:
        return np.concatenate([self.rho, self.phi])

    def hat(self) -> np.ndarray:
        """4x4 matrix form xi^."""
        m = np.zeros((4, 4))
        m[:3, :3] = hat3(self.phi)
        m[:3, 3] = self.rho
        return m


@dataclass(frozen=True)
class Pose:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self) -> None:
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(-1)
        if r.shape != (3, 3) or t.shape != (3,):
            raise InvalidArgumentError("pose needs a 3x3 rotation and a 3-vector translation")
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(t))):
            raise InvalidArgumentError("pose components must be finite")
        if np.max(np.abs(r.T @ r - np.eye(3))) > ORTHO_TOL or np.linalg.det(r) <= 0:
            raise InvalidArgumentError("pose rotation must be orthonormal with determinant +1")
        object.__setattr__(self, "rotation", _frozen(r))
        object.__setattr__(self, "translation", _frozen(t))

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "Pose":
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    @classmethod
    def from_translation(cls, t: Iterable[float]) -> "Pose":
        return cls(np.eye(3), np.asarray(list(t), dtype=np.float64))

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def compose(self, other: "Pose") -> "Pose":
        """self * other (apply ``other`` first)."""
        return Pose(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def __matmul__(self, other: "Pose") -> "Pose":
        return self.compose(other)

    def inverse(self) -> "Pose":
        rt = self.rotation.T
        return Pose(rt, -(rt @ self.translation))

    def apply(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.T + self.translation

    def normalized(self) -> "Pose":
        """Nearest proper rotation via polar decomposition (SVD)."""
        u, _, vt = np.linalg.svd(self.rotation)
        d = 1.0 if np.linalg.det(u @ vt) >= 0 else -1.0
        r = u @ np.diag([1.0, 1.0, d]) @ vt
        return Pose(r, self.translation)

    # Quaternions are (qx, qy, qz, qw), unit norm, qw >= 0.
    @classmethod
    def from_quaternion(cls, translation: Iterable[float], quat: Iterable[float]) -> "Pose":
        return cls(quaternion_to_matrix(quat), np.asarray(list(translation), dtype=np.float64))

    def quaternion(self) -> np.ndarray:
        return matrix_to_quaternion(self.rotation)

    def to_row(self) -> list[float]:
        return [*map(float, self.translation), *map(float, self.quaternion())]

    @classmethod
    def from_row(cls, row: Iterable[float]) -> "Pose":
        vals = [float(v) for v in row]
        if len(vals) != 7:
            raise InvalidArgumentError(f"pose row needs 7 values (tx,ty,tz,qx,qy,qz,qw), got {len(vals)}")
        return cls.from_quaternion(vals[:3], vals[3:])


def quaternion_to_matrix(quat: Iterable[float]) -> np.ndarray:
    x, y, z, w = (float(v) for v in quat)
    n = math.sqrt(x * x + y * y + z * z + w * w)
    if not math.isfinite(n) or n == 0.0:
        raise InvalidArgumentError("quaternion must be finite and non-zero")
    x, y, z, w = x / n, y / n, z / n, w / n
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quaternion(r: np.ndarray) -> np.ndarray:
    # Shepperd: branch on the largest of (trace, diagonal) for stability.
    r = np.asarray(r, dtype=np.float64)
    tr = r[0, 0] + r[1, 1] + r[2, 2]
    diag = (tr, r[0, 0], r[1, 1], r[2, 2])
    k = int(np.argmax(diag))
    if k == 0:
        s = 2.0 * math.sqrt(1.0 + tr)
        q = [(r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s, 0.25 * s]
    elif k == 1:
        s = 2.0 * math.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2])
        q = [0.25 * s, (r[0, 1] + r[1, 0]) / s, (r[0, 2] + r[2, 0]) / s, (r[2, 1] - r[1, 2]) / s]
    elif k == 2:
        s = 2.0 * math.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2])
        q = [(r[0, 1] + r[1, 0]) / s, 0.25 * s, (r[1, 2] + r[2, 1]) / s, (r[0, 2] - r[2, 0]) / s]
    else:
        s = 2.0 * math.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1])
        q = [(r[0, 2] + r[2, 0]) / s, (r[1, 2] + r[2, 1]) / s, 0.25 * s, (r[1, 0] - r[0, 1]) / s]
    q = np.array(q)
    q /= np.linalg.norm(q)
    return -q if q[3] < 0 else q


def so3_exp(phi: np.ndarray) -> np.ndarray:
    phi = np.asarray(phi, dtype=np.float64)
    theta = float(np.linalg.norm(phi))
    k = hat3(phi)
    if theta < SMALL_ANGLE:
        return np.eye(3) + k + 0.5 * (k @ k)
    a = math.sin(theta) / theta
    b = (1.0 - math.cos(theta)) / theta**2
    return np.eye(3) + a * k + b * (k @ k)


def left_jacobian(phi: np.ndarray) -> np.ndarray:
    phi = np.asarray(phi, dtype=np.float64)
    theta = float(np.linalg.norm(phi))
    k = hat3(phi)
    if theta < SMALL_ANGLE:
        return np.eye(3) + 0.5 * k + (k @ k) / 6.0
    b = (1.0 - math.cos(theta)) / theta**2
    c = (theta - math.sin(theta)) / theta**3
    return np.eye(3) + b * k + c * (k @ k)


def left_jacobian_inverse(phi: np.ndarray) -> np.ndarray:
    phi = np.asarray(phi, dtype=np.float64)
    theta = float(np.linalg.norm(phi))
    k = hat3(phi)
    if theta < SMALL_ANGLE:
        return np.eye(3) - 0.5 * k + (k @ k) / 12.0
    half = 0.5 * theta
    coef = (1.0 - half * math.cos(half) / math.sin(half)) / theta**2
    return np.eye(3) - 0.5 * k + coef * (k @ k)


def rotation_angle(r: np.ndarray) -> float:
    """Angle of a rotation matrix in [0, pi], accurate at both ends."""
    r = np.asarray(r, dtype=np.float64)
    s = 0.5 * float(np.linalg.norm(vee3(r - r.T)))
    c = 0.5 * (float(np.trace(r)) - 1.0)
    return math.atan2(s, c)


def so3_log(r: np.ndarray, pi_margin: float = PI_MARGIN) -> np.ndarray:
    r = np.asarray(r, dtype=np.float64)
    theta = rotation_angle(r)
    if math.pi - theta < pi_margin:
        raise BranchAmbiguityError(f"rotation angle {theta!r} is within {pi_margin} of pi")
    skew = vee3(r - r.T)
    if theta < SMALL_ANGLE:
        # r - r^T = 2 sin(theta) [a]x ~ 2 phi^ to second order
        return 0.5 * skew
    s = math.sin(theta)
    if s > 1e-3:
        return theta / (2.0 * s) * skew
    # Near pi: axis from the symmetric part, sign from the skew part.
    sym = 0.5 * (r + r.T) - math.cos(theta) * np.eye(3)
    i = int(np.argmax(np.diag(sym)))
    axis = sym[:, i] / np.linalg.norm(sym[:, i])
    if float(axis @ skew) < 0:
        axis = -axis
    return theta * axis


def se3_exp(xi: Twist | Iterable[float]) -> Pose:
    if not isinstance(xi, Twist):
        xi = Twist.from_vector(xi)
    if not (np.all(np.isfinite(xi.rho)) and np.all(np.isfinite(xi.phi))):
        raise InvalidArgumentError("twist components must be finite")
    return Pose(so3_exp(xi.phi), left_jacobian(xi.phi) @ xi.rho)


def se3_log(p: Pose) -> Twist:
    phi = so3_log(p.rotation)
    return Twist(left_jacobian_inverse(phi) @ p.translation, phi)


@dataclass(frozen=True)
class PerturbationSpec:
    """Per-axis standard deviations of the twist (rho then phi) and a seed."""

    sigma: tuple[float, ...] = DEFAULT_SIGMA
    seed: int = 0

    def __post_init__(self) -> None:
        sigma = tuple(float(s) for s in self.sigma)
        if len(sigma) != 6:
            raise InvalidArgumentError("perturbation sigma needs 6 components")
        if any(not math.isfinite(s) or s < 0 for s in sigma):
            raise InvalidArgumentError("perturbation sigmas must be finite and >= 0")
        object.__setattr__(self, "sigma", sigma)

    def scaled(self, factor: float) -> "PerturbationSpec":
        return PerturbationSpec(tuple(s * factor for s in self.sigma), self.seed)


def sample_perturbation(spec: PerturbationSpec, rng: Rng | None = None) -> Twist:
    """Draw xi ~ N(0, diag(sigma^2)); six variates are consumed per call."""
    if rng is None:
        rng = Rng(spec.seed)
    z = rng.normal(6)
    return Twist.from_vector(z * np.asarray(spec.sigma))


def perturb_pose(gt: Pose, spec: PerturbationSpec, rng: Rng | None = None) -> Pose:
    """T_init = exp(xi^) T_gt."""
    return se3_exp(sample_perturbation(spec, rng)) @ gt


def translation_error(a: Pose, b: Pose) -> float:
    return float(np.linalg.norm(a.translation - b.translation))


def rotation_error(a: Pose, b: Pose) -> float:
    """Angle of C_a C_b^-1, in [0, pi]."""
    theta = rotation_angle(a.rotation @ b.rotation.T)
    if theta >= math.pi:
        raise BranchAmbiguityError("relative rotation is exactly pi")
    return theta


def rotation_error_vector(estimate: Pose, truth: Pose) -> np.ndarray:
    """Rotation vector of C_est C_truth^-1 (roll, pitch, yaw-like components)."""
    return so3_log(estimate.rotation @ truth.rotation.T, pi_margin=0.0)


POSE_HEADER = ["tx", "ty", "tz", "qx", "qy", "qz", "qw"]
TRAJECTORY_HEADER = ["pose_id", *POSE_HEADER]


def read_trajectory(path: str | Path) -> list[tuple[str, Pose]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != TRAJECTORY_HEADER:
            raise InvalidArgumentError(f"{path}: expected header {','.join(TRAJECTORY_HEADER)}")
        out = []
        for lineno, row in enumerate(reader, start=2):
            if not row or not "".join(row).strip():
                continue
            if len(row) != 8:
                raise InvalidArgumentError(f"{path}:{lineno}: expected 8 columns, got {len(row)}")
            try:
                out.append((row[0].strip(), Pose.from_row(row[1:])))
            except ValueError as exc:
                raise InvalidArgumentError(f"{path}:{lineno}: {exc}") from exc
        return out


def write_trajectory(path: str | Path, poses: Iterable[tuple[str, Pose]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        format_trajectory(fh, poses)


def format_trajectory(fh, poses: Iterable[tuple[str, Pose]]) -> None:
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(TRAJECTORY_HEADER)
    for pose_id, pose in poses:
        writer.writerow([pose_id, *(repr(v) for v in pose.to_row())])
