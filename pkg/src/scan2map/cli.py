"""Command-line entry point: ``scan2map <subcommand> ...``.

Exit codes: 0 success, 1 usage error (bad flags, bad config), 2 data error
(unreadable or malformed inputs, degenerate geometry). Diagnostics go to
stderr; data goes to files under ``--output-dir`` or to stdout.
"""

from __future__ import annotations

import argparse
import io
import json
import os
import sys
from pathlib import Path
from typing import Sequence

from . import __version__
from .bench import RunConfig, apply_overrides, run_benchmark
from .change import change_report
from .cloud import PointCloud
from .errors import InvalidArgumentError, Scan2MapError
from .icp import Variant, register
from .plyio import PlyError, read_ply, write_ply
from .rng import Rng
from .scansim import project_scan
from .se3 import Pose, format_trajectory, perturb_pose, read_trajectory, write_trajectory
from .synthgen import SceneKind, SceneSpec, generate, generate_pair, line_trajectory

SEED_ENV = "SCAN2MAP_SEED"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _common(p: argparse.ArgumentParser, config: bool = True) -> None:
    p.add_argument("-o", "--output-dir", help="directory for output files (default: stdout where possible)")
    p.add_argument("--seed", type=int, help=f"run seed (default: config seed, else ${SEED_ENV}, else 0)")
    if config:
        p.add_argument("--config", help="JSON run config")
        p.add_argument(
            "--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
            help="dotted config override, e.g. icp.max_iterations=150 (repeatable)",
        )


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="scan2map", description="Scan-to-map ICP relocalization benchmark.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="subcommand", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("synth", help="generate a synthetic scene and a straight trajectory through it")
    _common(p, config=False)
    p.add_argument("--kind", choices=[k.value for k in SceneKind], default=SceneKind.CLUTTER.value)
    p.add_argument("--extent", type=float, default=20.0, help="scene half-length in m")
    p.add_argument("--density", type=float, default=100.0, help="surface points per m^2")
    p.add_argument("--object-fraction", type=float, default=0.03, help="object_change: added points / reference points")
    p.add_argument("--poses", type=int, default=20, help="trajectory length")
    p.add_argument("--spacing", type=float, default=1.0, help="trajectory pose spacing in m")

    p = sub.add_parser("project", help="project a lidar scan from a map at one or more poses")
    _common(p)
    p.add_argument("map", help="map PLY")
    _pose_source(p)

    p = sub.add_parser("perturb", help="sample perturbed initial poses")
    _common(p)
    _pose_source(p)
    p.add_argument("--count", type=int, help="draws per pose (default: config trials)")

    p = sub.add_parser("register", help="register a scan against a map")
    _common(p)
    p.add_argument("scan", help="reading scan PLY")
    p.add_argument("map", help="reference map PLY")
    p.add_argument("--init", metavar="ROW", help="initial pose tx,ty,tz,qx,qy,qz,qw (default identity)")
    p.add_argument("--variant", choices=[v.value for v in Variant], help="default: config icp.variant")

    p = sub.add_parser("change", help="per-pose change percentages of a session against a reference")
    _common(p, config=False)
    p.add_argument("session", help="session PLY")
    p.add_argument("reference", help="reference PLY")
    p.add_argument("trajectory", help="trajectory CSV")
    p.add_argument("--threshold", type=float, default=0.3, help="change distance in m")
    p.add_argument("--radius", type=float, default=35.0, help="sphere radius in m")
    p.add_argument("--voxel", type=float, default=0.0, help="voxel filter in m applied to both clouds (default 0: off)")

    p = sub.add_parser("evaluate", help="run the full benchmark over a trajectory")
    _common(p)
    p.add_argument("--map", help="map PLY (overrides config map_path)")
    p.add_argument("--trajectory", help="trajectory CSV (overrides config trajectory_path)")
    p.add_argument("--jobs", type=int, default=os.cpu_count() or 1, help="worker processes (default: CPU count)")
    p.add_argument("--plot", action="store_true", help="also write errors.svg")
    return parser


def _pose_source(p: argparse.ArgumentParser) -> None:
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--pose", metavar="ROW", help="tx,ty,tz,qx,qy,qz,qw")
    g.add_argument("--trajectory", help="trajectory CSV")
    p.add_argument("--pose-id", help="with --trajectory: only this pose")


def _resolve_seed(flag: int | None, config_seed: int | None) -> int:
    if flag is not None:
        return flag
    if config_seed is not None:
        return config_seed
    env = os.environ.get(SEED_ENV)
    if env:
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"{SEED_ENV} must be an integer, got {env!r}") from None
    return 0


def load_config(args: argparse.Namespace, extra: dict | None = None) -> RunConfig:
    """Config file, then --set overrides, then flags; fails before any work."""
    raw: dict = {}
    if getattr(args, "config", None):
        try:
            raw = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except OSError as exc:
            raise UsageError(f"cannot read config {args.config}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"config {args.config} is not valid JSON: {exc}") from None
        if not isinstance(raw, dict):
            raise UsageError(f"config {args.config} must hold a JSON object")
    try:
        raw = apply_overrides(raw, getattr(args, "overrides", []))
        raw.update(extra or {})
        raw["seed"] = _resolve_seed(args.seed, raw.get("seed") if "seed" in raw else None)
        return RunConfig.from_dict(raw)
    except (InvalidArgumentError, TypeError, ValueError) as exc:
        raise UsageError(f"bad config: {exc}") from None


def _parse_pose(row: str) -> Pose:
    try:
        return Pose.from_row(row.split(","))
    except ValueError as exc:
        raise UsageError(f"bad pose {row!r}: {exc}") from None


def _poses(args) -> list[tuple[str, Pose]]:
    if args.pose is not None:
        if args.pose_id:
            raise UsageError("--pose-id needs --trajectory")
        return [("pose", _parse_pose(args.pose))]
    poses = read_trajectory(args.trajectory)
    if args.pose_id:
        poses = [(pid, p) for pid, p in poses if pid == args.pose_id]
        if not poses:
            raise InvalidArgumentError(f"pose_id {args.pose_id!r} not in {args.trajectory}")
    return poses


def _out_dir(args) -> Path | None:
    if not args.output_dir:
        return None
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _emit(args, name: str, text: str) -> None:
    out = _out_dir(args)
    if out is None:
        sys.stdout.write(text)
    else:
        (out / name).write_text(text, encoding="utf-8")
        print(f"wrote {out / name}", file=sys.stderr)


def cmd_synth(args) -> None:
    seed = _resolve_seed(args.seed, None)
    try:
        spec = SceneSpec(args.kind, args.extent, args.density, seed, args.object_fraction)
    except (InvalidArgumentError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    if args.poses < 1:
        raise UsageError("--poses must be >= 1")
    out = Path(args.output_dir or ".")
    out.mkdir(parents=True, exist_ok=True)
    if spec.kind is SceneKind.OBJECT_CHANGE:
        reference, session = generate_pair(spec)
        clouds = {"reference.ply": reference, "session.ply": session}
    else:
        clouds = {"map.ply": generate(spec)}
    for name, cloud in clouds.items():
        write_ply(out / name, cloud)
        print(f"{out / name}: {len(cloud)} points", file=sys.stderr)
    write_trajectory(out / "trajectory.csv", line_trajectory(args.poses, args.spacing))
    manifest = {
        "scene": spec.to_dict(),
        "files": {name: {"points": len(cloud)} for name, cloud in clouds.items()},
        "trajectory": {"file": "trajectory.csv", "poses": args.poses, "spacing": args.spacing},
    }
    (out / "scene.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")


def cmd_project(args) -> None:
    cfg = load_config(args)
    poses = _poses(args)
    cloud = read_ply(args.map)
    out = Path(args.output_dir or ".")
    out.mkdir(parents=True, exist_ok=True)
    for pose_id, pose in poses:
        scan = project_scan(cloud, pose, cfg.beam)
        path = out / f"scan_{pose_id}.ply"
        write_ply(path, scan)
        print(f"{path}: {len(scan)} points", file=sys.stderr)


def cmd_perturb(args) -> None:
    cfg = load_config(args)
    count = cfg.trials if args.count is None else args.count
    if count < 1:
        raise UsageError("--count must be >= 1")
    rng = Rng(cfg.seed)
    rows = []
    for pose_id, pose in _poses(args):
        for t in range(count):
            # same streams as the benchmark's per-trial initial poses
            init = perturb_pose(pose, cfg.perturbation, rng.derive("init", pose_id, t))
            rows.append((f"{pose_id}_{t:03d}", init))
    buf = io.StringIO()
    format_trajectory(buf, rows)
    _emit(args, "perturbed.csv", buf.getvalue())


def cmd_register(args) -> None:
    cfg = load_config(args)
    init = _parse_pose(args.init) if args.init else Pose.identity()
    icp = cfg.icp_for(Variant(args.variant)) if args.variant else cfg.icp
    scan = read_ply(args.scan)
    reference = read_ply(args.map)
    result = register(PointCloud(scan.points), reference, init=init, cfg=icp)
    doc = {"variant": icp.variant.value, **result.to_dict()}
    _emit(args, "registration.json", json.dumps(doc, indent=2) + "\n")


def cmd_change(args) -> None:
    if not args.threshold > 0 or not args.radius > 0 or args.voxel < 0:
        raise UsageError("--threshold and --radius must be > 0 and --voxel >= 0")
    session = read_ply(args.session)
    reference = read_ply(args.reference)
    poses = read_trajectory(args.trajectory)
    report = change_report(session, reference, poses, args.radius, args.threshold, args.voxel or None)
    out = _out_dir(args)
    if out is None:
        sys.stdout.write(report.to_json())
        return
    (out / "change.json").write_text(report.to_json(), encoding="utf-8")
    (out / "change.csv").write_text(report.to_csv(), encoding="utf-8")
    s = report.summary
    print(f"change %: median {s['median']:.4f}, IQR {s['iqr']:.4f}, max {s['max']:.4f}", file=sys.stderr)


def cmd_evaluate(args) -> None:
    extra = {}
    if args.map:
        extra["map_path"] = args.map
    if args.trajectory:
        extra["trajectory_path"] = args.trajectory
    cfg = load_config(args, extra)
    if args.jobs < 1:
        raise UsageError("--jobs must be >= 1")
    report = run_benchmark(cfg, jobs=args.jobs, output_dir=args.output_dir or ".", plot=args.plot)
    for variant, entry in report.summary().items():
        line = f"{variant}: poses={entry['poses']} failed={entry['failed_poses']}"
        for key in ("translation", "rotation"):
            s = entry[key]
            if s is not None:
                unit = "m" if key == "translation" else "rad"
                line += f" {key}[{unit}] median={s['median']:.6g} iqr={s['iqr']:.6g} max={s['max']:.6g}"
        print(line)


COMMANDS = {
    "synth": cmd_synth,
    "project": cmd_project,
    "perturb": cmd_perturb,
    "register": cmd_register,
    "change": cmd_change,
    "evaluate": cmd_evaluate,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        COMMANDS[args.command](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:
        # --help / --version
        return 0 if exc.code in (0, None) else 1
    except (Scan2MapError, PlyError, OSError, ValueError, ZeroDivisionError, RuntimeError) as exc:
        print(f"scan2map: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
