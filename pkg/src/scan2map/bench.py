"""Scan-to-map relocalization benchmark.

Per pose: crop a spherical submap around the ground-truth position, voxel
filter it, project a lidar scan at the ground truth, add Gaussian point
noise once, then for every trial draw a perturbed initial guess
T_init = exp(xi^) T_gt and register the scan with each ICP variant. A pose's
error is the median over trials of |t_icp - t_gt| and of
|log(C_gt C_icp^-1)|.

Each pose is evaluated in a frame translated so the ground-truth position
is the origin (``local_frame``). Translation and rotation errors do not
depend on that shift, but the left-composed perturbation then rotates about
the sensor instead of about the map origin.

Random streams are keyed by (run seed, pose_id, purpose, trial), so poses can
be evaluated in any order or process and give identical reports.
"""

from __future__ import annotations

import copy
import csv
import io
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .change import summarize_changes
from .cloud import NoiseSpec, PointCloud, SpatialIndex, add_noise, estimate_normals, radius_crop, voxel_downsample
from .errors import DegenerateGeometryError, EmptyInputError, EmptyMapError, InvalidArgumentError, Scan2MapError
from .icp import IcpConfig, Variant, register
from .plyio import read_ply
from .rng import Rng
from .scansim import BeamModel, project_scan
from .se3 import (
    PerturbationSpec,
    Pose,
    perturb_pose,
    read_trajectory,
    rotation_error,
    rotation_error_vector,
    translation_error,
)

SCHEMA_VERSION = 1
DEFAULT_VARIANTS = (Variant.POINT_TO_POINT, Variant.POINT_TO_PLANE)


def median(values: Iterable[float]) -> float:
    """50th percentile; the mean of the two middle values for even counts."""
    v = np.asarray(list(values), dtype=np.float64)
    if v.size == 0:
        raise EmptyInputError("median of an empty sequence")
    return float(np.percentile(v, 50, method="linear"))


@dataclass(frozen=True)
class RunConfig:
    map_path: str = ""
    trajectory_path: str = ""
    submap_radius: float = 35.0
    voxel: float = 0.1
    beam: BeamModel = field(default_factory=BeamModel)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    perturbation: PerturbationSpec = field(default_factory=PerturbationSpec)
    icp: IcpConfig = field(default_factory=IcpConfig)
    variants: tuple[Variant, ...] = DEFAULT_VARIANTS
    trials: int = 30
    seed: int = 0
    # alternate protocol: new scan noise for every trial
    fresh_scan_noise_per_trial: bool = False
    local_frame: bool = True

    def __post_init__(self) -> None:
        object.__setattr__(self, "variants", tuple(Variant(v) for v in self.variants))
        if self.trials < 1:
            raise InvalidArgumentError("trials must be >= 1")
        if not self.submap_radius > 0:
            raise InvalidArgumentError("submap_radius must be > 0")
        if not self.voxel >= 0:
            raise InvalidArgumentError("voxel must be >= 0 (0 disables the filter)")
        if not self.variants:
            raise InvalidArgumentError("at least one ICP variant is required")
        if not 0 <= int(self.seed) < 1 << 64:
            raise InvalidArgumentError("seed must be a 64-bit unsigned integer")

    def icp_for(self, variant: Variant) -> IcpConfig:
        return replace(self.icp, variant=variant)

    def to_dict(self) -> dict:
        icp = self.icp.to_dict()
        icp.pop("variant")
        return {
            "map_path": self.map_path,
            "trajectory_path": self.trajectory_path,
            "submap_radius": self.submap_radius,
            "voxel": self.voxel,
            "beam": self.beam.to_dict(),
            "noise": {"sigma": self.noise.sigma, "seed": self.noise.seed},
            "perturbation": {"sigma": list(self.perturbation.sigma), "seed": self.perturbation.seed},
            "icp": icp,
            "variants": [v.value for v in self.variants],
            "trials": self.trials,
            "seed": self.seed,
            "fresh_scan_noise_per_trial": self.fresh_scan_noise_per_trial,
            "local_frame": self.local_frame,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidArgumentError(f"unknown config keys: {sorted(unknown)}")
        kw = dict(d)
        try:
            if "beam" in kw:
                kw["beam"] = BeamModel(**{**BeamModel().to_dict(), **kw["beam"]})
            if "noise" in kw:
                kw["noise"] = NoiseSpec(**kw["noise"])
            if "perturbation" in kw:
                p = dict(kw["perturbation"])
                kw["perturbation"] = PerturbationSpec(tuple(p.pop("sigma", PerturbationSpec().sigma)), **p)
            if "icp" in kw:
                kw["icp"] = IcpConfig(**kw["icp"])
            if "variants" in kw:
                kw["variants"] = tuple(kw["variants"])
            for key in ("submap_radius", "voxel"):
                if key in kw:
                    kw[key] = float(kw[key])
            for key in ("trials", "seed"):
                if key in kw:
                    kw[key] = int(kw[key])
            return cls(**kw)
        except TypeError as exc:
            raise InvalidArgumentError(f"bad config: {exc}") from exc


def apply_overrides(config: dict, overrides: Sequence[str]) -> dict:
    """Apply ``dotted.key=value`` overrides; values parse as JSON, else as strings."""
    out = copy.deepcopy(config)
    for item in overrides:
        if "=" not in item:
            raise InvalidArgumentError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = out
        parts = key.strip().split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise InvalidArgumentError(f"override {key!r} descends into a non-object")
        node[parts[-1]] = value
    return out


@dataclass(frozen=True)
class TrialRecord:
    translation_error: float
    rotation_error: float
    converged: bool
    iterations: int
    correspondences: int
    rms_residual: float
    failed: bool
    translation_delta: tuple[float, float, float]
    rotation_delta: tuple[float, float, float]

    def to_dict(self) -> dict:
        return {
            "translation_error": self.translation_error,
            "rotation_error": self.rotation_error,
            "converged": self.converged,
            "iterations": self.iterations,
            "correspondences": self.correspondences,
            "rms_residual": self.rms_residual,
            "failed": self.failed,
            "translation_delta": list(self.translation_delta),
            "rotation_delta": list(self.rotation_delta),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrialRecord":
        d = dict(d)
        d["translation_delta"] = tuple(d["translation_delta"])
        d["rotation_delta"] = tuple(d["rotation_delta"])
        return cls(**d)


@dataclass(frozen=True)
class EvalRecord:
    pose_id: str
    variant: Variant
    median_translation_error: float
    median_rotation_error: float
    trials: tuple[TrialRecord, ...]
    failed: bool = False
    reason: str | None = None
    scan_points: int = 0
    submap_points: int = 0

    @property
    def converged_trials(self) -> int:
        return sum(t.converged for t in self.trials)

    @property
    def mean_correspondences(self) -> float:
        return float(np.mean([t.correspondences for t in self.trials])) if self.trials else 0.0

    def to_dict(self) -> dict:
        return {
            "pose_id": self.pose_id,
            "variant": self.variant.value,
            "median_translation_error": _json_float(self.median_translation_error),
            "median_rotation_error": _json_float(self.median_rotation_error),
            "converged_trials": self.converged_trials,
            "failed": self.failed,
            "reason": self.reason,
            "scan_points": self.scan_points,
            "submap_points": self.submap_points,
            "mean_correspondences": self.mean_correspondences,
            "trials": [t.to_dict() for t in self.trials],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalRecord":
        trials = tuple(TrialRecord.from_dict(t) for t in d["trials"])
        rec = cls(
            d["pose_id"],
            Variant(d["variant"]),
            _float(d["median_translation_error"]),
            _float(d["median_rotation_error"]),
            trials,
            d["failed"],
            d.get("reason"),
            d.get("scan_points", 0),
            d.get("submap_points", 0),
        )
        rec.check()
        return rec

    def check(self) -> None:
        """Raise if the stored medians differ from the trial errors."""
        if not self.trials:
            if not (math.isnan(self.median_translation_error) and math.isnan(self.median_rotation_error)):
                raise InvalidArgumentError(f"{self.pose_id}/{self.variant.value}: medians without trials")
            return
        mt = median(t.translation_error for t in self.trials)
        mr = median(t.rotation_error for t in self.trials)
        if mt != self.median_translation_error or mr != self.median_rotation_error:
            raise InvalidArgumentError(f"{self.pose_id}/{self.variant.value}: medians do not match trial errors")


def _json_float(x: float):
    return None if x is None or not math.isfinite(x) else x


def _float(x) -> float:
    return math.nan if x is None else float(x)


def _failed_record(pose_id: str, variant: Variant, reason: str, submap_points: int = 0, scan_points: int = 0) -> EvalRecord:
    return EvalRecord(pose_id, variant, math.nan, math.nan, (), True, reason, scan_points, submap_points)


def evaluate_pose(
    map_index: SpatialIndex | None,
    map_cloud: PointCloud,
    gt: Pose,
    cfg: RunConfig,
    pose_id: str = "0",
    rng: Rng | None = None,
) -> tuple[EvalRecord, ...]:
    """One record per configured variant (default: point-to-point, point-to-plane)."""
    rng = rng or Rng(cfg.seed)
    submap = radius_crop(map_cloud, gt.translation, cfg.submap_radius, map_index)
    if cfg.voxel > 0:
        submap = voxel_downsample(submap, cfg.voxel)
    if len(submap) == 0:
        return tuple(_failed_record(pose_id, v, "empty submap") for v in cfg.variants)

    if cfg.local_frame:
        shift = Pose.from_translation(-gt.translation)
        submap = submap.transformed(shift)
        gt = shift @ gt

    try:
        clean_scan = project_scan(submap, gt, cfg.beam)
    except EmptyMapError:
        clean_scan = PointCloud(np.zeros((0, 3)))
    if len(clean_scan) < cfg.icp.min_correspondences:
        return tuple(
            _failed_record(pose_id, v, "scan too sparse", len(submap), len(clean_scan)) for v in cfg.variants
        )

    index = SpatialIndex(submap)
    if Variant.POINT_TO_PLANE in cfg.variants:
        submap = estimate_normals(submap, cfg.icp.normal_k, gt.translation, index)

    scan_rng = rng.derive("scan", pose_id)
    scan = add_noise(clean_scan, cfg.noise, scan_rng)
    trials: dict[Variant, list[TrialRecord]] = {v: [] for v in cfg.variants}
    for t in range(cfg.trials):
        if cfg.fresh_scan_noise_per_trial:
            scan = add_noise(clean_scan, cfg.noise, rng.derive("scan", pose_id, t))
        init = perturb_pose(gt, cfg.perturbation, rng.derive("init", pose_id, t))
        for variant in cfg.variants:
            trials[variant].append(_run_trial(scan, submap, index, init, gt, cfg.icp_for(variant)))

    records = []
    for variant in cfg.variants:
        rows = tuple(trials[variant])
        all_failed = all(r.failed for r in rows)
        records.append(
            EvalRecord(
                pose_id,
                variant,
                median(r.translation_error for r in rows),
                median(r.rotation_error for r in rows),
                rows,
                all_failed,
                "degenerate registration on all trials" if all_failed else None,
                len(clean_scan),
                len(submap),
            )
        )
    return tuple(records)


def _run_trial(scan, submap, index, init: Pose, gt: Pose, icp: IcpConfig) -> TrialRecord:
    try:
        res = register(scan, submap, index, init, icp)
        est, converged, iters, corr, rms, failed = (
            res.pose, res.converged, res.iterations, res.correspondence_count, res.final_rms_residual, False,
        )
    except DegenerateGeometryError:
        # a failed registration leaves the estimate at the initial guess
        est, converged, iters, corr, rms, failed = init, False, 0, 0, math.nan, True
    return TrialRecord(
        translation_error(est, gt),
        rotation_error(gt, est),
        converged,
        iters,
        corr,
        rms if math.isfinite(rms) else 0.0,
        failed,
        tuple(float(v) for v in est.translation - gt.translation),
        tuple(float(v) for v in rotation_error_vector(est, gt)),
    )


@dataclass
class BenchmarkReport:
    config: RunConfig
    records: list[EvalRecord]

    def summary(self) -> dict:
        out = {}
        for variant in self.config.variants:
            recs = [r for r in self.records if r.variant is variant and r.trials]
            entry = {"poses": len(recs), "failed_poses": sum(r.failed for r in self.records if r.variant is variant)}
            for key, attr in (("translation", "median_translation_error"), ("rotation", "median_rotation_error")):
                vals = [getattr(r, attr) for r in recs]
                entry[key] = summarize_changes(vals) if vals else None
            out[variant.value] = entry
        return out

    def to_dict(self) -> dict:
        return {
            "schema": SCHEMA_VERSION,
            "config": self.config.to_dict(),
            "summary": self.summary(),
            "records": [r.to_dict() for r in self.records],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, allow_nan=False) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["pose_id", "variant", "median_trans_m", "median_rot_rad", "converged_trials", "trials"])
        for r in self.records:
            writer.writerow(
                [r.pose_id, r.variant.value, repr(r.median_translation_error), repr(r.median_rotation_error),
                 r.converged_trials, len(r.trials)]
            )
        return buf.getvalue()

    def write(self, output_dir: str | Path, plot: bool = False) -> list[Path]:
        out = Path(output_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = [out / "report.csv", out / "report.json"]
        paths[0].write_text(self.to_csv(), encoding="utf-8")
        paths[1].write_text(self.to_json(), encoding="utf-8")
        if plot:
            paths.append(out / "errors.svg")
            paths[2].write_text(error_plot_svg(self), encoding="utf-8")
        return paths

    @classmethod
    def from_dict(cls, d: dict) -> "BenchmarkReport":
        if d.get("schema") != SCHEMA_VERSION:
            raise InvalidArgumentError(f"unsupported report schema {d.get('schema')!r}")
        return cls(RunConfig.from_dict(d["config"]), [EvalRecord.from_dict(r) for r in d["records"]])


def load_report(path: str | Path) -> BenchmarkReport:
    """Read a JSON report, checking every median against its trials."""
    return BenchmarkReport.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def error_plot_svg(report: BenchmarkReport, width: int = 800, panel: int = 220) -> str:
    """Error magnitude vs pose index: translation and rotation panels, one line per variant."""
    colors = {Variant.POINT_TO_POINT: "#d62728", Variant.POINT_TO_PLANE: "#1f77b4"}
    pose_ids = list(dict.fromkeys(r.pose_id for r in report.records))
    n = max(len(pose_ids), 2)
    margin = 50
    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{2 * panel + 40}" '
        f'font-family="sans-serif" font-size="11">'
    ]
    for p, (label, attr, scale) in enumerate(
        (("translation error [m]", "median_translation_error", 1.0),
         ("rotation error [deg]", "median_rotation_error", 180.0 / math.pi))
    ):
        top = 20 + p * panel
        h = panel - 40
        vals = [getattr(r, attr) * scale for r in report.records if math.isfinite(getattr(r, attr))]
        ymax = max(vals) if vals else 1.0
        ymax = ymax if ymax > 0 else 1.0
        lines.append(f'<text x="{margin}" y="{top - 5}">{label} (max {ymax:.4g})</text>')
        lines.append(
            f'<rect x="{margin}" y="{top}" width="{width - 2 * margin}" height="{h}" fill="none" stroke="#888"/>'
        )
        for variant in report.config.variants:
            pts = []
            for r in report.records:
                if r.variant is variant and math.isfinite(getattr(r, attr)):
                    x = margin + (width - 2 * margin) * pose_ids.index(r.pose_id) / (n - 1)
                    y = top + h - h * getattr(r, attr) * scale / ymax
                    pts.append(f"{x:.2f},{y:.2f}")
            lines.append(
                f'<polyline fill="none" stroke="{colors.get(variant, "#000")}" points="{" ".join(pts)}"/>'
            )
    for k, variant in enumerate(report.config.variants):
        lines.append(
            f'<text x="{margin + 150 * k}" y="{2 * panel + 30}" fill="{colors.get(variant, "#000")}">'
            f"{variant.value}</text>"
        )
    lines.append("</svg>")
    return "\n".join(lines) + "\n"


# worker-process state for parallel runs
_WORKER: dict = {}


def _init_worker(points: np.ndarray, cfg_dict: dict) -> None:
    cloud = PointCloud(points, check=False)
    _WORKER["map"] = cloud
    _WORKER["index"] = SpatialIndex(cloud)
    _WORKER["cfg"] = RunConfig.from_dict(cfg_dict)


def _worker_eval(pose_id: str, pose: Pose) -> list[dict]:
    recs = evaluate_pose(_WORKER["index"], _WORKER["map"], pose, _WORKER["cfg"], pose_id)
    return [r.to_dict() for r in recs]


def evaluate_trajectory(
    map_cloud: PointCloud,
    poses: Sequence[tuple[str, Pose]],
    cfg: RunConfig,
    jobs: int = 1,
) -> BenchmarkReport:
    ids = [pid for pid, _ in poses]
    if len(set(ids)) != len(ids):
        raise InvalidArgumentError("trajectory pose_ids must be unique")
    if jobs <= 1 or len(poses) <= 1:
        index = SpatialIndex(map_cloud)
        records = [r for pid, pose in poses for r in evaluate_pose(index, map_cloud, pose, cfg, pid)]
        # round-trip through the serialised form so every job count yields the same objects
        records = [EvalRecord.from_dict(r.to_dict()) for r in records]
        return BenchmarkReport(cfg, records)
    with ProcessPoolExecutor(
        max_workers=jobs, initializer=_init_worker, initargs=(np.asarray(map_cloud.points), cfg.to_dict())
    ) as pool:
        futures = [pool.submit(_worker_eval, pid, pose) for pid, pose in poses]
        records = [EvalRecord.from_dict(d) for f in futures for d in f.result()]
    return BenchmarkReport(cfg, records)


def run_benchmark(
    cfg: RunConfig,
    jobs: int | None = 1,
    output_dir: str | Path | None = None,
    plot: bool = False,
) -> BenchmarkReport:
    """Evaluate every trajectory pose of ``cfg`` and optionally write the report files."""
    for label, path in (("map", cfg.map_path), ("trajectory", cfg.trajectory_path)):
        if not path or not os.access(path, os.R_OK):
            raise FileNotFoundError(f"cannot read {label} file: {path!r}")
    map_cloud = read_ply(cfg.map_path)
    poses = read_trajectory(cfg.trajectory_path)
    report = evaluate_trajectory(map_cloud, poses, cfg, jobs or os.cpu_count() or 1)
    if output_dir is not None:
        report.write(output_dir, plot=plot)
    return report


__all__ = [
    "BenchmarkReport",
    "EvalRecord",
    "RunConfig",
    "Scan2MapError",
    "TrialRecord",
    "apply_overrides",
    "evaluate_pose",
    "evaluate_trajectory",
    "load_report",
    "median",
    "run_benchmark",
]
