"""Mesh file IO: ASCII OBJ (positions, faces, optional per-vertex UV) and
binary little-endian PLY."""

from __future__ import annotations

import struct

import numpy as np


class MeshIOError(ValueError):
    pass


def save_obj(path, vertices, faces, uv=None):
    """Write ASCII OBJ. %.9g keeps float32 positions exact on round trip."""
    vertices = np.asarray(vertices, dtype=np.float32)
    faces = np.asarray(faces, dtype=np.int64)
    with open(path, "w") as fh:
        for v in vertices:
            fh.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
        if uv is not None:
            uv = np.asarray(uv, dtype=np.float32)
            for t in uv:
                fh.write(f"vt {t[0]:.9g} {t[1]:.9g}\n")
            for f in faces:
                fh.write("f {0}/{0} {1}/{1} {2}/{2}\n".format(f[0] + 1, f[1] + 1, f[2] + 1))
        else:
            for f in faces:
                fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")


def load_obj(path):
    """Read ASCII OBJ -> (vertices (V,3) f32, faces (F,3) i64, uv (V,2) f32 or None).

    Only v/vt/f records are interpreted; vt indices must match vertex indices
    (the save_obj layout). Faces with more than 3 vertices are fan-triangulated.
    """
    verts, uvs, faces = [], [], []
    with open(path) as fh:
        for ln, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            tag = parts[0]
            try:
                if tag == "v":
                    verts.append([float(x) for x in parts[1:4]])
                elif tag == "vt":
                    uvs.append([float(x) for x in parts[1:3]])
                elif tag == "f":
                    ids = [int(p.split("/")[0]) - 1 for p in parts[1:]]
                    for i in range(1, len(ids) - 1):
                        faces.append([ids[0], ids[i], ids[i + 1]])
            except (ValueError, IndexError) as e:
                raise MeshIOError(f"{path}:{ln}: bad OBJ record: {line.strip()!r}") from e
    if not verts:
        raise MeshIOError(f"{path}: no vertices")
    v = np.array(verts, dtype=np.float32)
    f = np.array(faces, dtype=np.int64) if faces else np.zeros((0, 3), dtype=np.int64)
    uv = np.array(uvs, dtype=np.float32) if uvs else None
    if uv is not None and len(uv) != len(v):
        raise MeshIOError(f"{path}: {len(uv)} vt records for {len(v)} vertices")
    return v, f, uv


_PLY_HEADER = """ply
format binary_little_endian 1.0
element vertex {nv}
property float x
property float y
property float z
element face {nf}
property list uchar int vertex_indices
end_header
"""


def save_ply(path, vertices, faces):
    vertices = np.ascontiguousarray(vertices, dtype="<f4")
    faces = np.asarray(faces, dtype="<i4")
    with open(path, "wb") as fh:
        fh.write(_PLY_HEADER.format(nv=len(vertices), nf=len(faces)).encode("ascii"))
        fh.write(vertices.tobytes())
        body = np.empty((len(faces), 13), dtype=np.uint8)
        body[:, 0] = 3
        body[:, 1:] = faces.astype("<i4").view(np.uint8).reshape(len(faces), 12)
        fh.write(body.tobytes())


def load_ply(path):
    with open(path, "rb") as fh:
        data = fh.read()
    end = data.find(b"end_header\n")
    if end < 0:
        raise MeshIOError(f"{path}: missing PLY header terminator")
    header = data[:end].decode("ascii", errors="replace").splitlines()
    if len(header) < 2 or header[0].strip() != "ply":
        raise MeshIOError(f"{path}: not a PLY file")
    if "binary_little_endian" not in header[1]:
        raise MeshIOError(f"{path}: only binary little-endian PLY is supported")
    nv = nf = None
    for line in header:
        parts = line.split()
        if parts[:2] == ["element", "vertex"]:
            nv = int(parts[2])
        elif parts[:2] == ["element", "face"]:
            nf = int(parts[2])
    if nv is None or nf is None:
        raise MeshIOError(f"{path}: PLY header missing vertex/face elements")
    body = data[end + len(b"end_header\n"):]
    need = nv * 12 + nf * 13
    if len(body) < need:
        raise MeshIOError(f"{path}: truncated PLY body ({len(body)} < {need} bytes)")
    verts = np.frombuffer(body[:nv * 12], dtype="<f4").reshape(nv, 3).copy()
    raw = np.frombuffer(body[nv * 12:need], dtype=np.uint8).reshape(nf, 13)
    if nf and not (raw[:, 0] == 3).all():
        raise MeshIOError(f"{path}: non-triangle face in PLY")
    faces = raw[:, 1:].copy().view("<i4").reshape(nf, 3).astype(np.int64)
    return verts, faces
