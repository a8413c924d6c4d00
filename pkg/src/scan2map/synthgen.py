"""Deterministic synthetic scenes for the registration failure regimes.

Surfaces are sampled by jittered grids: one point per cell of side
1 / sqrt(density), uniformly placed inside the cell. Grids start at the
primitive's corner, so at 100 pts/m^2 with corners on multiples of 0.1 m a
0.1 m voxel filter keeps every ground/wall point.

``extent`` is the half-length of the scene along x (and the half-width of
open ground along y). The ground is the plane z = 0; trajectories run along
the x axis.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .cloud import PointCloud
from .errors import InvalidArgumentError
from .rng import Rng
from .se3 import Pose, so3_exp

CORRIDOR_HALF_WIDTH = 2.0
CORRIDOR_HEIGHT = 3.0
WALL_HALF_WIDTH = 5.0
WALL_OFFSET = 4.0
WALL_HEIGHT = 4.0
LANE_HALF_WIDTH = 1.5
OBJECT_CLEARANCE = 0.5
CLUTTER_AREA_PER_OBJECT = 20.0
SENSOR_HEIGHT = 1.8

# keep samples off cell borders so voxel binning is unambiguous
_JITTER_MARGIN = 0.01


class SceneKind(str, enum.Enum):
    CORRIDOR = "corridor"
    FLAT_GROUND = "flat_ground"
    WALL_ONLY = "wall_only"
    CLUTTER = "clutter"
    FOREST_CORRIDOR = "forest_corridor"
    OBJECT_CHANGE = "object_change"


@dataclass(frozen=True)
class SceneSpec:
    kind: SceneKind = SceneKind.CLUTTER
    extent: float = 20.0
    density: float = 100.0
    seed: int = 0
    # ObjectChange only: added points as a fraction of the reference count
    object_fraction: float = 0.03

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", SceneKind(self.kind))
        if not self.extent > 0:
            raise InvalidArgumentError("scene extent must be > 0")
        if not self.density > 0:
            raise InvalidArgumentError("scene density must be > 0")
        if not 0 <= self.object_fraction:
            raise InvalidArgumentError("object_fraction must be >= 0")

    @property
    def cell(self) -> float:
        return 1.0 / math.sqrt(self.density)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "extent": self.extent,
            "density": self.density,
            "seed": self.seed,
            "object_fraction": self.object_fraction,
        }


@dataclass
class Surface:
    """A sampled primitive: its points and its true area."""

    name: str
    points: np.ndarray
    area: float


def sample_rectangle(origin, u, v, len_u: float, len_v: float, density: float, rng: Rng) -> np.ndarray:
    """Jittered-grid samples on the rectangle origin + s*u + t*v, s<len_u, t<len_v."""
    origin, u, v = (np.asarray(x, dtype=np.float64) for x in (origin, u, v))
    cell = 1.0 / math.sqrt(density)
    short, long_ = (len_u, len_v) if len_u <= len_v else (len_v, len_u)
    n_short = max(1, round(short / cell))
    n_long = max(1, round(len_u * len_v * density / n_short))
    nu, nv = (n_short, n_long) if len_u <= len_v else (n_long, n_short)
    iu, iv = np.meshgrid(np.arange(nu), np.arange(nv), indexing="ij")
    jit = _JITTER_MARGIN + (1 - 2 * _JITTER_MARGIN) * rng.uniform(2 * nu * nv).reshape(2, -1)
    s = (iu.ravel() + jit[0]) * (len_u / nu)
    t = (iv.ravel() + jit[1]) * (len_v / nv)
    return origin + s[:, None] * u + t[:, None] * v


def sample_cylinder(center_xy, radius: float, z0: float, height: float, density: float, rng: Rng) -> np.ndarray:
    """Lateral surface of a vertical cylinder (no caps)."""
    circ = 2.0 * math.pi * radius
    flat = sample_rectangle((0, 0, 0), (1, 0, 0), (0, 1, 0), circ, height, density, rng)
    ang = flat[:, 0] / radius
    return np.column_stack(
        [center_xy[0] + radius * np.cos(ang), center_xy[1] + radius * np.sin(ang), z0 + flat[:, 1]]
    )


def sample_box(center_xy, size, z0: float, yaw: float, density: float, rng: Rng) -> list[Surface]:
    """Four sides and the top of a box rotated by ``yaw`` about z."""
    sx, sy, sz = size
    rot = so3_exp(np.array([0.0, 0.0, yaw]))
    corner = np.array([-sx / 2, -sy / 2, 0.0])
    faces = [
        ("side_y-", corner, (1, 0, 0), (0, 0, 1), sx, sz),
        ("side_y+", corner + (0, sy, 0), (1, 0, 0), (0, 0, 1), sx, sz),
        ("side_x-", corner, (0, 1, 0), (0, 0, 1), sy, sz),
        ("side_x+", corner + (sx, 0, 0), (0, 1, 0), (0, 0, 1), sy, sz),
        ("top", corner + (0, 0, sz), (1, 0, 0), (0, 1, 0), sx, sy),
    ]
    out = []
    offset = np.array([center_xy[0], center_xy[1], z0])
    for name, o, u, v, lu, lv in faces:
        pts = sample_rectangle(o, u, v, lu, lv, density, rng) @ rot.T + offset
        out.append(Surface(f"box_{name}", pts, lu * lv))
    return out


def _ground(spec: SceneSpec, rng: Rng, half_width: float | None = None) -> Surface:
    e = spec.extent
    w = e if half_width is None else half_width
    pts = sample_rectangle((-e, -w, 0.0), (1, 0, 0), (0, 1, 0), 2 * e, 2 * w, spec.density, rng)
    return Surface("ground", pts, 4 * e * w)


def _wall(name: str, x0: float, x1: float, y: float, height: float, spec: SceneSpec, rng: Rng) -> Surface:
    pts = sample_rectangle((x0, y, 0.0), (1, 0, 0), (0, 0, 1), x1 - x0, height, spec.density, rng)
    return Surface(name, pts, (x1 - x0) * height)


def _corridor(spec: SceneSpec, rng: Rng) -> list[Surface]:
    e, hw = spec.extent, CORRIDOR_HALF_WIDTH
    return [
        _ground(spec, rng.derive("ground"), half_width=hw),
        _wall("wall_left", -e, e, hw, CORRIDOR_HEIGHT, spec, rng.derive("left")),
        _wall("wall_right", -e, e, -hw, CORRIDOR_HEIGHT, spec, rng.derive("right")),
    ]


def _wall_only(spec: SceneSpec, rng: Rng) -> list[Surface]:
    return [
        _ground(spec, rng.derive("ground")),
        _wall("wall", -WALL_HALF_WIDTH, WALL_HALF_WIDTH, WALL_OFFSET, WALL_HEIGHT, spec, rng.derive("wall")),
    ]


def _clutter(spec: SceneSpec, rng: Rng) -> list[Surface]:
    e = spec.extent
    surfaces = [_ground(spec, rng.derive("ground"))]
    layout = rng.derive("layout")
    n_objects = max(4, round(4 * e * e / CLUTTER_AREA_PER_OBJECT))
    for k in range(n_objects):
        u = layout.uniform(8)
        x = -e + 1.0 + (2 * e - 2.0) * u[0]
        # objects sit on either side of a clear lane along the x axis
        side = 1.0 if u[1] >= 0.5 else -1.0
        y = side * (LANE_HALF_WIDTH + 0.5 + (e - LANE_HALF_WIDTH - 1.5) * u[2])
        obj_rng = rng.derive("object", k)
        if u[3] < 0.5:
            radius = 0.2 + 0.4 * u[4]
            height = 1.5 + 3.5 * u[5]
            pts = sample_cylinder((x, y), radius, 0.0, height, spec.density, obj_rng)
            surfaces.append(Surface(f"cylinder_{k}", pts, 2 * math.pi * radius * height))
        else:
            size = (0.8 + 2.2 * u[4], 0.8 + 2.2 * u[5], 1.0 + 2.5 * u[6])
            for s in sample_box((x, y), size, 0.0, math.pi * u[7], spec.density, obj_rng):
                s.name = f"{s.name}_{k}"
                surfaces.append(s)
    return surfaces


def _forest_corridor(spec: SceneSpec, rng: Rng) -> list[Surface]:
    e = spec.extent
    surfaces = [_ground(spec, rng.derive("ground"))]
    layout = rng.derive("layout")
    k = 0
    for side in (-1.0, 1.0):
        x = -e + 0.5
        while x < e:
            u = layout.uniform(4)
            radius = 0.15 + 0.2 * u[0]
            height = 8.0 + 7.0 * u[1]
            cx = x + 0.6 * (u[2] - 0.5)
            cy = side * (CORRIDOR_HALF_WIDTH + radius + 0.6 * u[3])
            pts = sample_cylinder((cx, cy), radius, 0.0, height, spec.density, rng.derive("trunk", k))
            surfaces.append(Surface(f"trunk_{k}", pts, 2 * math.pi * radius * height))
            k += 1
            x += 1.5
    return surfaces


def scene_surfaces(spec: SceneSpec) -> list[Surface]:
    """Per-primitive samples of the scene (the base scene for ObjectChange)."""
    rng = Rng(spec.seed, "scene", spec.kind.value)
    kind = spec.kind
    if kind is SceneKind.FLAT_GROUND:
        return [_ground(spec, rng.derive("ground"))]
    if kind is SceneKind.CORRIDOR:
        return _corridor(spec, rng)
    if kind in (SceneKind.WALL_ONLY, SceneKind.OBJECT_CHANGE):
        return _wall_only(spec, rng)
    if kind is SceneKind.CLUTTER:
        return _clutter(spec, rng)
    if kind is SceneKind.FOREST_CORRIDOR:
        return _forest_corridor(spec, rng)
    raise InvalidArgumentError(f"unknown scene kind {kind!r}")


def _cloud(surfaces: list[Surface]) -> PointCloud:
    return PointCloud(np.concatenate([s.points for s in surfaces]))


def added_object(spec: SceneSpec, n_points: int) -> np.ndarray:
    """The "parked car": ``n_points`` samples on the shell of an elevated box.

    Shell voxels (side ``spec.cell``) are enumerated, ``n_points`` of them are
    picked at random and each gets one jittered point, so a voxel filter of
    that size keeps all of them. The box floats ``OBJECT_CLEARANCE`` above
    the ground and sits on the open side of the wall scene.
    """
    if n_points <= 0:
        return np.zeros((0, 3))
    cell = spec.cell
    h = max(3, round(1.5 / cell))
    w = 3
    while True:
        ln = 2 * w
        shell = ln * w * h - max(ln - 2, 0) * max(w - 2, 0) * max(h - 2, 0)
        if shell >= n_points:
            break
        w += 1
    ix, iy, iz = np.meshgrid(np.arange(ln), np.arange(w), np.arange(h), indexing="ij")
    on_shell = (ix == 0) | (ix == ln - 1) | (iy == 0) | (iy == w - 1) | (iz == 0) | (iz == h - 1)
    cells = np.column_stack([ix[on_shell], iy[on_shell], iz[on_shell]])
    rng = Rng(spec.seed, "object", n_points)
    order = np.argsort(rng.uniform(len(cells)), kind="stable")
    chosen = cells[np.sort(order[:n_points])]
    base = np.array(
        [
            math.floor(-ln / 2),
            math.floor(-WALL_OFFSET / cell) - w - math.ceil(1.0 / cell),
            math.ceil(OBJECT_CLEARANCE / cell),
        ]
    )
    jit = _JITTER_MARGIN + (1 - 2 * _JITTER_MARGIN) * rng.uniform(3 * n_points).reshape(-1, 3)
    return (base + chosen + jit) * cell


def generate_pair(spec: SceneSpec) -> tuple[PointCloud, PointCloud]:
    """(reference, session) where session = reference + added object."""
    if spec.kind is not SceneKind.OBJECT_CHANGE:
        raise InvalidArgumentError("generate_pair requires an object_change scene")
    reference = _cloud(scene_surfaces(spec))
    n = round(spec.object_fraction * len(reference))
    obj = added_object(spec, n)
    session = PointCloud(np.concatenate([reference.points, obj]))
    return reference, session


def generate(spec: SceneSpec) -> PointCloud:
    """The scene cloud; for ObjectChange, the session variant with the object."""
    if spec.kind is SceneKind.OBJECT_CHANGE:
        return generate_pair(spec)[1]
    return _cloud(scene_surfaces(spec))


def line_trajectory(n: int, spacing: float = 1.0, height: float = SENSOR_HEIGHT, start: float | None = None) -> list[tuple[str, Pose]]:
    """``n`` poses along +x at ``height``, heading +x, centred on the origin by default."""
    if start is None:
        start = -0.5 * spacing * (n - 1)
    return [(f"{i:04d}", Pose.from_translation((start + i * spacing, 0.0, height))) for i in range(n)]
