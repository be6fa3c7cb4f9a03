"""Mesh and point-cloud file I/O: ASCII OBJ, binary little-endian PLY, XYZ text."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import InputError


def save_obj(path, vertices, faces):
    """Write an ASCII OBJ with v/f lines (1-based face indices)."""
    vertices = np.asarray(vertices, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64)
    lines = ["v %.9g %.9g %.9g" % tuple(v) for v in vertices]
    lines += ["f %d %d %d" % (f[0] + 1, f[1] + 1, f[2] + 1) for f in faces]
    Path(path).write_text("\n".join(lines) + "\n")


def load_obj(path):
    vertices, faces = [], []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            vertices.append([float(x) for x in parts[1:4]])
        elif parts[0] == "f":
            faces.append([int(p.split("/")[0]) - 1 for p in parts[1:4]])
    return np.asarray(vertices, dtype=np.float64), np.asarray(faces, dtype=np.int64)


def save_ply(path, vertices, faces=None, normals=None):
    """Write a binary little-endian PLY mesh or point cloud."""
    vertices = np.asarray(vertices, dtype="<f4")
    props = ["property float x", "property float y", "property float z"]
    if normals is not None:
        normals = np.asarray(normals, dtype="<f4")
        props += ["property float nx", "property float ny", "property float nz"]
    header = ["ply", "format binary_little_endian 1.0",
              f"element vertex {len(vertices)}"] + props
    if faces is not None:
        faces = np.asarray(faces, dtype="<i4")
        header += [f"element face {len(faces)}",
                   "property list uchar int vertex_indices"]
    header.append("end_header")

    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        vdata = vertices if normals is None else np.hstack([vertices, normals])
        fh.write(np.ascontiguousarray(vdata, dtype="<f4").tobytes())
        if faces is not None:
            rec = np.empty(len(faces), dtype=[("n", "u1"), ("idx", "<i4", (3,))])
            rec["n"] = 3
            rec["idx"] = faces
            fh.write(rec.tobytes())


def load_ply(path):
    """Read PLY (our binary LE layout or simple ASCII). Returns (vertices, faces, normals)."""
    raw = Path(path).read_bytes()
    end = raw.find(b"end_header")
    if end < 0:
        raise InputError(f"{path}: not a PLY file")
    header = raw[:end].decode("ascii", errors="replace").splitlines()
    body = raw[end + len(b"end_header") + 1:]

    fmt = None
    elements = []  # (name, count, [(type, prop)])
    for line in header:
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            elements.append((parts[1], int(parts[2]), []))
        elif parts[0] == "property" and elements:
            elements[-1][2].append(tuple(parts[1:]))
    if fmt not in ("binary_little_endian", "ascii"):
        raise InputError(f"{path}: unsupported PLY format {fmt!r}")

    vert_el = next((e for e in elements if e[0] == "vertex"), None)
    face_el = next((e for e in elements if e[0] == "face"), None)
    if vert_el is None:
        raise InputError(f"{path}: PLY without vertex element")
    names = [p[-1] for p in vert_el[2]]

    if fmt == "ascii":
        rows = body.decode("ascii").split()
        stride = len(names)
        n = vert_el[1]
        vals = np.asarray(rows[: n * stride], dtype=np.float64).reshape(n, stride)
        cursor_rows = rows[n * stride:]
        verts = vals[:, [names.index(c) for c in "xyz"]]
        normals = None
        if all(c in names for c in ("nx", "ny", "nz")):
            normals = vals[:, [names.index(c) for c in ("nx", "ny", "nz")]]
        faces = None
        if face_el is not None:
            faces = []
            i = 0
            for _ in range(face_el[1]):
                cnt = int(cursor_rows[i])
                faces.append([int(x) for x in cursor_rows[i + 1: i + 1 + cnt]])
                i += 1 + cnt
            faces = np.asarray(faces, dtype=np.int64)
        return verts, faces, normals

    scalar = {"float": "<f4", "float32": "<f4", "double": "<f8",
              "int": "<i4", "int32": "<i4", "uchar": "u1", "uint8": "u1"}
    if any(p[0] == "list" for p in vert_el[2]):
        raise InputError(f"{path}: list property on vertices unsupported")
    dtype = np.dtype([(p[-1], scalar[p[0]]) for p in vert_el[2]])
    n = vert_el[1]
    vdata = np.frombuffer(body[: n * dtype.itemsize], dtype=dtype)
    body = body[n * dtype.itemsize:]
    verts = np.stack([vdata[c] for c in "xyz"], axis=1).astype(np.float64)
    normals = None
    if all(c in dtype.names for c in ("nx", "ny", "nz")):
        normals = np.stack([vdata[c] for c in ("nx", "ny", "nz")], axis=1).astype(np.float64)

    faces = None
    if face_el is not None:
        faces = np.empty((face_el[1], 3), dtype=np.int64)
        off = 0
        for i in range(face_el[1]):
            cnt = body[off]
            if cnt != 3:
                raise InputError(f"{path}: only triangle faces supported")
            faces[i] = struct.unpack_from("<3i", body, off + 1)
            off += 1 + 12
    return verts, faces, normals


def load_xyz(path):
    """Read whitespace text point cloud: x y z [nx ny nz] per line."""
    rows = []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        rows.append([float(x) for x in parts])
    if not rows:
        raise InputError(f"{path}: empty point cloud")
    arr = np.asarray(rows, dtype=np.float64)
    if arr.shape[1] >= 6:
        return arr[:, :3], arr[:, 3:6]
    return arr[:, :3], None


def load_scan(path):
    """Load a scan point cloud (PLY or XYZ) as (points, normals_or_None)."""
    suffix = Path(path).suffix.lower()
    if suffix == ".ply":
        verts, _, normals = load_ply(path)
        return verts, normals
    if suffix in (".xyz", ".txt"):
        return load_xyz(path)
    raise InputError(f"{path}: unsupported scan format {suffix!r}")
