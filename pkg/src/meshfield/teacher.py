"""Analytic teacher scenes: exact SDF + procedural color oracles.

These stand in for a pre-trained coordinate-network teacher. The SDF is a
small primitive tree (sphere / box / union / intersection / smooth union),
the color is a procedural albedo shaded by a fixed directional light with an
optional specular lobe for view dependence. Everything is numpy, vectorized
over (N, 3) query batches, and deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from skimage import measure as _measure

from . import scaffold as _scaffold


class TeacherError(ValueError):
    pass


# ---------------------------------------------------------------------------
# SDF primitive tree

@dataclass
class Sphere:
    radius: float
    center: tuple = (0.0, 0.0, 0.0)

    def sdf(self, x):
        return np.linalg.norm(x - np.asarray(self.center), axis=-1) - self.radius


@dataclass
class Box:
    half_extents: tuple
    center: tuple = (0.0, 0.0, 0.0)

    def sdf(self, x):
        q = np.abs(x - np.asarray(self.center)) - np.asarray(self.half_extents)
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(q.max(axis=-1), 0.0)
        return outside + inside


@dataclass
class Union:
    children: list

    def sdf(self, x):
        return np.minimum.reduce([c.sdf(x) for c in self.children])


@dataclass
class Intersection:
    children: list

    def sdf(self, x):
        return np.maximum.reduce([c.sdf(x) for c in self.children])


@dataclass
class SmoothUnion:
    k: float
    children: list

    def sdf(self, x):
        # polynomial smooth-min folded pairwise
        vals = [c.sdf(x) for c in self.children]
        a = vals[0]
        for b in vals[1:]:
            h = np.clip(0.5 + 0.5 * (b - a) / self.k, 0.0, 1.0)
            a = b * (1 - h) + a * h - self.k * h * (1 - h)
        return a


# ---------------------------------------------------------------------------
# Color field

@dataclass
class ColorSpec:
    albedo: str = "checker"           # checker | stripes | uniform
    scale: float = 4.0                # cells per unit length
    color_a: tuple = (0.85, 0.35, 0.25)
    color_b: tuple = (0.2, 0.45, 0.85)
    light_dir: tuple = (0.5, 0.5, 1.0)  # toward the light, normalized on use
    ambient: float = 0.45
    diffuse: float = 0.55
    specular: float = 0.0
    shininess: float = 32.0


@dataclass
class TeacherScene:
    root: object
    color: ColorSpec = field(default_factory=ColorSpec)


def teacher_sdf(scene: TeacherScene, x):
    """Signed distance (negative inside) at points x (..., 3)."""
    return scene.root.sdf(np.asarray(x, dtype=np.float64))


def teacher_normal(scene: TeacherScene, x, h=1e-4):
    """Unit SDF gradient by central differences."""
    x = np.asarray(x, dtype=np.float64)
    g = np.stack([
        scene.root.sdf(x + np.array(off) * h) - scene.root.sdf(x - np.array(off) * h)
        for off in ((1, 0, 0), (0, 1, 0), (0, 0, 1))], axis=-1)
    n = np.linalg.norm(g, axis=-1, keepdims=True)
    return g / np.maximum(n, 1e-12)


def teacher_albedo(scene: TeacherScene, x):
    """Procedural base color before shading, in [0, 1]."""
    x = np.asarray(x, dtype=np.float64)
    c = scene.color
    a = np.asarray(c.color_a)
    b = np.asarray(c.color_b)
    if c.albedo == "uniform":
        return np.broadcast_to(a, x.shape).copy()
    if c.albedo == "checker":
        cells = np.floor(x * c.scale).astype(np.int64).sum(axis=-1)
        pick = (cells % 2 == 0)
    elif c.albedo == "stripes":
        pick = (np.floor(x[..., 2] * c.scale).astype(np.int64) % 2 == 0)
    else:
        raise TeacherError(f"unknown albedo kind {c.albedo!r}")
    return np.where(pick[..., None], a, b)


def teacher_color(scene: TeacherScene, x, d):
    """Shaded color at x seen from direction d (camera -> point), in [0, 1]."""
    x = np.asarray(x, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    c = scene.color
    l = np.asarray(c.light_dir, dtype=np.float64)
    l = l / np.linalg.norm(l)
    n = teacher_normal(scene, x)
    lambert = np.maximum((n * l).sum(axis=-1), 0.0)
    col = teacher_albedo(scene, x) * (c.ambient + c.diffuse * lambert)[..., None]
    if c.specular > 0:
        refl = 2.0 * (n * l).sum(axis=-1, keepdims=True) * n - l
        spec = np.maximum((refl * (-d)).sum(axis=-1), 0.0) ** c.shininess
        col = col + c.specular * spec[..., None]
    return np.clip(col, 0.0, 1.0)


# ---------------------------------------------------------------------------
# Reference rendering (sphere tracing) and scaffold extraction

def render_teacher_image(scene: TeacherScene, camera, background=(0, 0, 0),
                         t_max=20.0, tol=1e-5, max_steps=256):
    """Ray-trace the analytic scene: (H, W, 3) image and (H, W) hit mask."""
    origins, dirs = camera.all_rays()
    n = len(origins)
    t = np.zeros(n)
    live = np.ones(n, dtype=bool)
    hit = np.zeros(n, dtype=bool)
    for _ in range(max_steps):
        if not live.any():
            break
        p = origins[live] + dirs[live] * t[live, None]
        s = teacher_sdf(scene, p)
        converged = np.abs(s) < tol
        idx = np.nonzero(live)[0]
        hit[idx[converged]] = True
        t[live] += s
        live[idx[converged]] = False
        live[t > t_max] = False
    img = np.broadcast_to(np.asarray(background, dtype=np.float64),
                          (n, 3)).copy()
    if hit.any():
        p = origins[hit] + dirs[hit] * t[hit, None]
        img[hit] = teacher_color(scene, p, dirs[hit])
    h, w = camera.height, camera.width
    return img.reshape(h, w, 3), hit.reshape(h, w)


def marching_cubes(scene: TeacherScene, resolution, vrange=(-1.0, 1.0)):
    """Zero level set of the teacher SDF as a triangle mesh.

    resolution: samples per axis (>= 8); vrange: (lo, hi) shared by all axes.
    Returns (vertices (V, 3) float32, faces (F, 3) int64); winding is
    normalized so face normals point along increasing SDF (outward).
    """
    if resolution < 8:
        raise TeacherError("marching cubes resolution must be >= 8")
    lo, hi = float(vrange[0]), float(vrange[1])
    if hi <= lo:
        raise TeacherError("range must satisfy lo < hi")
    axis = np.linspace(lo, hi, resolution)
    gx, gy, gz = np.meshgrid(axis, axis, axis, indexing="ij")
    pts = np.stack([gx, gy, gz], axis=-1).reshape(-1, 3)
    vol = teacher_sdf(scene, pts).reshape(resolution, resolution, resolution)
    if vol.min() >= 0 or vol.max() <= 0:
        raise TeacherError("SDF has no zero crossing inside the range")
    spacing = (hi - lo) / (resolution - 1)
    verts, faces, _, _ = _measure.marching_cubes(
        vol, level=0.0, spacing=(spacing,) * 3, gradient_direction="ascent")
    verts = verts + lo
    return verts.astype(np.float32), faces.astype(np.int64)


def cell_size(resolution, vrange=(-1.0, 1.0)):
    return (float(vrange[1]) - float(vrange[0])) / (resolution - 1)


# ---------------------------------------------------------------------------
# Scene spec parsing (used by the run-config loader)

def _split_args(body):
    """Split a top-level argument list on ';' respecting nested parentheses."""
    parts, depth, cur = [], 0, []
    for ch in body:
        if ch == "(":
            depth += 1
        elif ch == ")":
            depth -= 1
        if ch == ";" and depth == 0:
            parts.append("".join(cur).strip())
            cur = []
        else:
            cur.append(ch)
    if cur:
        parts.append("".join(cur).strip())
    return [p for p in parts if p]


def parse_sdf_spec(text):
    """Parse an SDF tree like 'smooth_union(0.1; sphere(0.6); box(0.3,0.3,0.3))'."""
    text = text.strip()
    if "(" not in text or not text.endswith(")"):
        raise TeacherError(f"bad SDF spec: {text!r}")
    head, body = text.split("(", 1)
    head = head.strip().lower()
    body = body[:-1]
    if head == "sphere":
        if "@" in body:
            r, c = body.split("@")
            return Sphere(radius=float(r.rstrip().rstrip(",")),
                          center=tuple(float(v) for v in c.split(",")))
        return Sphere(radius=float(body))
    if head == "box":
        if "@" in body:
            he, c = body.split("@")
            return Box(half_extents=tuple(float(v) for v in he.rstrip().rstrip(",").split(",")),
                       center=tuple(float(v) for v in c.split(",")))
        return Box(half_extents=tuple(float(v) for v in body.split(",")))
    if head in ("union", "intersection"):
        children = [parse_sdf_spec(p) for p in _split_args(body)]
        if len(children) < 2:
            raise TeacherError(f"{head} needs at least 2 children: {text!r}")
        return Union(children) if head == "union" else Intersection(children)
    if head == "smooth_union":
        parts = _split_args(body)
        if len(parts) < 3:
            raise TeacherError(f"smooth_union needs k and 2+ children: {text!r}")
        return SmoothUnion(k=float(parts[0]), children=[parse_sdf_spec(p) for p in parts[1:]])
    raise TeacherError(f"unknown SDF primitive {head!r}")


def parse_albedo_spec(text):
    """Parse 'checker(4; r,g,b; r,g,b)' / 'stripes(...)' / 'uniform(r,g,b)'."""
    text = text.strip()
    if "(" not in text or not text.endswith(")"):
        raise TeacherError(f"bad albedo spec: {text!r}")
    head, body = text.split("(", 1)
    head = head.strip().lower()
    parts = _split_args(body[:-1])
    if head == "uniform":
        return dict(albedo="uniform", color_a=tuple(float(v) for v in parts[0].split(",")))
    if head in ("checker", "stripes"):
        if len(parts) != 3:
            raise TeacherError(f"{head} needs (scale; colorA; colorB): {text!r}")
        return dict(albedo=head, scale=float(parts[0]),
                    color_a=tuple(float(v) for v in parts[1].split(",")),
                    color_b=tuple(float(v) for v in parts[2].split(",")))
    raise TeacherError(f"unknown albedo kind {head!r}")
