"""PLY reader/writer for colored point clouds (ASCII and binary little-endian)."""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from .types import PointCloud

_PLY_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}


class PlyError(ValueError):
    """Malformed or unsupported PLY input."""


def _parse_header(data: bytes):
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise PlyError("line 1: not a PLY file (missing 'ply' magic or 'end_header')")
    nl = data.find(b"\n", end)
    if nl < 0:
        raise PlyError(f"offset {end}: header not terminated by newline")
    body_start = nl + 1
    lines = data[:end].decode("ascii", errors="replace").splitlines()
    fmt = None
    elements: list[tuple[str, int, list[tuple[str, str]]]] = []
    for lineno, line in enumerate(lines, start=1):
        tok = line.split()
        if not tok or tok[0] in ("ply", "comment", "obj_info"):
            continue
        if tok[0] == "format":
            if len(tok) != 3 or tok[2] != "1.0":
                raise PlyError(f"line {lineno}: bad format line {line!r}")
            if tok[1] not in ("ascii", "binary_little_endian"):
                raise PlyError(f"line {lineno}: unsupported format {tok[1]!r}")
            fmt = tok[1]
        elif tok[0] == "element":
            if len(tok) != 3 or not tok[2].isdigit():
                raise PlyError(f"line {lineno}: bad element line {line!r}")
            elements.append((tok[1], int(tok[2]), []))
        elif tok[0] == "property":
            if not elements:
                raise PlyError(f"line {lineno}: property before any element")
            if tok[1] == "list":
                if elements[-1][0] == "vertex":
                    raise PlyError(f"line {lineno}: list properties on vertices are not supported")
                elements[-1][2].append((tok[-1], "list"))
                continue
            if len(tok) != 3 or tok[1] not in _PLY_TYPES:
                raise PlyError(f"line {lineno}: bad property line {line!r}")
            elements[-1][2].append((tok[2], _PLY_TYPES[tok[1]]))
        else:
            raise PlyError(f"line {lineno}: unexpected header keyword {tok[0]!r}")
    if fmt is None:
        raise PlyError("header has no format line")
    return fmt, elements, body_start


def read_ply(path: str | os.PathLike, depth: int | None = None) -> PointCloud:
    """Load a colored point cloud.

    Requires ``x, y, z`` and ``red, green, blue`` vertex properties;
    ``nx, ny, nz`` are read when present. 8-bit colors are mapped to [0, 1].
    ``depth`` defaults to the smallest grid that holds every coordinate.
    """
    data = Path(path).read_bytes()
    fmt, elements, body_start = _parse_header(data)
    if not elements or elements[0][0] != "vertex":
        raise PlyError("first element must be 'vertex'")
    for name, count, _ in elements[1:]:
        if count:
            raise PlyError(f"unsupported non-empty element {name!r}")
    _, count, props = elements[0]
    names = [p[0] for p in props]
    for req in ("x", "y", "z", "red", "green", "blue"):
        if req not in names:
            raise PlyError(f"vertex element lacks property {req!r}")
    has_normals = all(n in names for n in ("nx", "ny", "nz"))

    dtype = np.dtype([(n, "<" + t) for n, t in props])
    if fmt == "binary_little_endian":
        need = count * dtype.itemsize
        if len(data) - body_start < need:
            raise PlyError(f"offset {len(data)}: truncated vertex data ({need} bytes expected)")
        rec = np.frombuffer(data, dtype=dtype, count=count, offset=body_start)
    else:
        text = data[body_start:].decode("ascii", errors="replace").split("\n")
        rows = [ln.split() for ln in text if ln.strip()]
        if len(rows) < count:
            raise PlyError(f"line {len(rows) + 1}: expected {count} vertex lines, found {len(rows)}")
        rec = np.zeros(count, dtype=dtype)
        for i in range(count):
            if len(rows[i]) != len(props):
                raise PlyError(f"vertex line {i + 1}: expected {len(props)} values, got {len(rows[i])}")
        if count:
            try:
                table = np.array(rows[:count], dtype=np.float64)
            except ValueError as exc:
                raise PlyError(f"vertex data: {exc}") from None
            for j, (n, _) in enumerate(props):
                rec[n] = table[:, j]

    pos = np.stack([rec["x"], rec["y"], rec["z"]], axis=1).astype(np.float64)
    col_raw = np.stack([rec["red"], rec["green"], rec["blue"]], axis=1).astype(np.float64)
    col = col_raw / 255.0
    normals = None
    if has_normals:
        normals = np.stack([rec["nx"], rec["ny"], rec["nz"]], axis=1).astype(np.float64)
        nrm = np.linalg.norm(normals, axis=1, keepdims=True)
        if normals.size and np.max(np.abs(nrm - 1.0)) > 1e-6:
            if np.min(nrm) < 1e-3:
                raise PlyError("vertex normals contain zero-length vectors")
            normals = normals / nrm
    if depth is None:
        top = float(pos.max()) if pos.size else 0.0
        depth = max(1, int(np.floor(top)).bit_length())
    return PointCloud(depth, pos, col, normals)


def _float_type(arr: np.ndarray) -> str:
    return "float" if np.array_equal(arr.astype(np.float32).astype(np.float64), arr) else "double"


def write_ply(cloud: PointCloud, path: str | os.PathLike, binary: bool = True) -> None:
    """Write ``cloud``; positions/normals use float32 when that is lossless."""
    n = len(cloud)
    ptype = _float_type(cloud.positions)
    fields = [("x", ptype), ("y", ptype), ("z", ptype)]
    if cloud.normals is not None:
        ntype = _float_type(cloud.normals)
        fields += [("nx", ntype), ("ny", ntype), ("nz", ntype)]
    fields += [("red", "uchar"), ("green", "uchar"), ("blue", "uchar")]
    header = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0", f"element vertex {n}"]
    header += [f"property {t} {name}" for name, t in fields]
    header.append("end_header")
    head = ("\n".join(header) + "\n").encode("ascii")

    rgb = np.clip(np.rint(cloud.colors * 255.0), 0, 255).astype(np.uint8)
    rec = np.zeros(n, dtype=np.dtype([(name, "<" + _PLY_TYPES[t]) for name, t in fields]))
    for j, c in enumerate("xyz"):
        rec[c] = cloud.positions[:, j]
    if cloud.normals is not None:
        for j, c in enumerate(("nx", "ny", "nz")):
            rec[c] = cloud.normals[:, j]
    for j, c in enumerate(("red", "green", "blue")):
        rec[c] = rgb[:, j]

    with open(path, "wb") as fh:
        fh.write(head)
        if binary:
            fh.write(rec.tobytes())
        else:
            for row in rec:
                fh.write((" ".join(_fmt(v) for v in row) + "\n").encode("ascii"))


def _fmt(v) -> str:
    if isinstance(v, (np.floating, float)):
        return repr(float(v))
    return str(int(v))
