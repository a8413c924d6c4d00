"""Minimal PLY reader/writer for vertex clouds.

Reads ascii and binary_little_endian files whose ``vertex`` element carries
x, y, z and optionally nx, ny, nz. Other vertex properties are skipped.
Elements preceding ``vertex`` may only hold scalar properties. Writes
binary_little_endian with float64 properties.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .cloud import PointCloud
from .errors import InvalidArgumentError

_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}


class PlyError(InvalidArgumentError):
    pass


def _parse_header(fh, path) -> tuple[str, list[tuple[str, int, list[tuple[str, str]]]]]:
    magic = fh.readline().strip()
    if magic != b"ply":
        raise PlyError(f"{path}: not a PLY file")
    fmt = None
    elements: list[tuple[str, int, list[tuple[str, str]]]] = []
    while True:
        line = fh.readline()
        if not line:
            raise PlyError(f"{path}: truncated header")
        words = line.decode("ascii", errors="replace").split()
        if not words or words[0] in ("comment", "obj_info"):
            continue
        if words[0] == "end_header":
            break
        if words[0] == "format":
            fmt = words[1]
        elif words[0] == "element":
            elements.append((words[1], int(words[2]), []))
        elif words[0] == "property":
            if not elements:
                raise PlyError(f"{path}: property before element")
            if words[1] == "list":
                elements[-1][2].append((words[4], "list"))
            else:
                if words[1] not in _TYPES:
                    raise PlyError(f"{path}: unknown property type {words[1]!r}")
                elements[-1][2].append((words[2], words[1]))
    if fmt not in ("ascii", "binary_little_endian"):
        raise PlyError(f"{path}: unsupported PLY format {fmt!r}")
    return fmt, elements


def read_ply(path: str | Path) -> PointCloud:
    path = Path(path)
    with open(path, "rb") as fh:
        fmt, elements = _parse_header(fh, path)
        for name, count, props in elements:
            if name == "vertex":
                break
            if any(t == "list" for _, t in props):
                raise PlyError(f"{path}: list properties before the vertex element are not supported")
            if fmt == "ascii":
                for _ in range(count):
                    fh.readline()
            else:
                fh.read(count * np.dtype([(n, "<" + _TYPES[t]) for n, t in props]).itemsize)
        else:
            raise PlyError(f"{path}: no vertex element")
        if any(t == "list" for _, t in props):
            raise PlyError(f"{path}: list properties in vertex element are not supported")
        names = [n for n, _ in props]
        for axis in ("x", "y", "z"):
            if axis not in names:
                raise PlyError(f"{path}: vertex element lacks property {axis!r}")
        if fmt == "ascii":
            rows = [fh.readline().split() for _ in range(count)]
            if any(len(r) < len(props) for r in rows):
                raise PlyError(f"{path}: truncated ascii vertex data")
            data = np.array([[float(v) for v in r[: len(props)]] for r in rows]).reshape(count, len(props))
            col = {n: data[:, i] for i, n in enumerate(names)}
        else:
            dtype = np.dtype([(n, "<" + _TYPES[t]) for n, t in props])
            buf = fh.read(count * dtype.itemsize)
            if len(buf) != count * dtype.itemsize:
                raise PlyError(f"{path}: truncated binary vertex data")
            data = np.frombuffer(buf, dtype=dtype, count=count)
            col = {n: data[n] for n in names}
    points = np.column_stack([col["x"], col["y"], col["z"]]).astype(np.float64)
    normals = None
    if all(k in col for k in ("nx", "ny", "nz")):
        normals = np.column_stack([col["nx"], col["ny"], col["nz"]]).astype(np.float64)
        norms = np.linalg.norm(normals, axis=1, keepdims=True)
        if np.any(norms == 0):
            normals = None
        else:
            normals = normals / norms
    return PointCloud(points, normals)


def write_ply(path: str | Path, cloud: PointCloud) -> None:
    props = ["x", "y", "z"] + (["nx", "ny", "nz"] if cloud.has_normals else [])
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {len(cloud)}"]
    header += [f"property double {p}" for p in props]
    header.append("end_header")
    data = cloud.points if not cloud.has_normals else np.hstack([cloud.points, cloud.normals])
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(np.ascontiguousarray(data, dtype="<f8").tobytes())
