"""Triangle-mesh scaffold: per-vertex learnable attributes and spatial queries.

The scaffold owns the mesh geometry plus everything that lives on its
vertices (latent codes, sign indicators, reference normals, radiance decoder
bindings). All arrays are numpy; training code lifts them into torch tensors
and writes results back.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

CODE_DIM = 32


class ScaffoldError(ValueError):
    pass


@dataclass
class MeshScaffold:
    vertices: np.ndarray           # (V, 3) float32, scene units
    faces: np.ndarray              # (F, 3) int64
    geometry_code: np.ndarray      # (V, C) float32
    texture_code: np.ndarray       # (V, C) float32
    sign_indicator: np.ndarray     # (V, 3) float32, free (not unit)
    reference_normal: np.ndarray   # (V, 3) float32, unit
    radiance_decoder_id: np.ndarray  # (V,) int64, index into the decoder table

    @property
    def n_vertices(self):
        return self.vertices.shape[0]

    @property
    def n_faces(self):
        return self.faces.shape[0]

    @property
    def code_dim(self):
        return self.geometry_code.shape[1]

    def copy(self):
        return MeshScaffold(*(a.copy() for a in (
            self.vertices, self.faces, self.geometry_code, self.texture_code,
            self.sign_indicator, self.reference_normal, self.radiance_decoder_id)))

    def validate(self):
        """Raise ScaffoldError on any invariant violation."""
        v, f = self.vertices, self.faces
        if v.ndim != 2 or v.shape[1] != 3 or v.shape[0] == 0:
            raise ScaffoldError(f"vertices must be (V, 3) with V >= 1, got {v.shape}")
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise ScaffoldError(
                f"face index out of range: max {f.max()} for {len(v)} vertices")
        if f.size:
            degen = (f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])
            if degen.any():
                raise ScaffoldError(f"degenerate face(s): {np.nonzero(degen)[0][:8].tolist()}")
        if self.geometry_code.shape != (len(v), self.code_dim) or \
           self.texture_code.shape != (len(v), self.code_dim):
            raise ScaffoldError("code arrays must be (V, C) with a uniform code dim")
        norms = np.linalg.norm(self.reference_normal.astype(np.float64), axis=1)
        if not np.all(np.abs(norms - 1.0) < 1e-6):
            bad = int(np.argmax(np.abs(norms - 1.0)))
            raise ScaffoldError(f"reference normal {bad} not unit length (|n|={norms[bad]:.8f})")
        for name in ("sign_indicator", "geometry_code", "texture_code"):
            if not np.isfinite(getattr(self, name)).all():
                raise ScaffoldError(f"{name} contains non-finite values")
        if self.radiance_decoder_id.shape != (len(v),) or self.radiance_decoder_id.min(initial=0) < 0:
            raise ScaffoldError("radiance_decoder_id must be (V,) non-negative")


def make_scaffold(vertices, faces, code_dim=CODE_DIM, code_init=None, seed=0):
    """Build a scaffold with freshly initialized per-vertex attributes.

    Sign indicators start at the area-weighted vertex normals; codes start at
    0.01 * N(0, 1) from `seed` (or zeros if code_init == "zeros").
    """
    vertices = np.ascontiguousarray(vertices, dtype=np.float32)
    faces = np.ascontiguousarray(faces, dtype=np.int64)
    normals = reference_normals(vertices, faces)
    rng = np.random.default_rng(seed)
    if code_init == "zeros":
        gc = np.zeros((len(vertices), code_dim), dtype=np.float32)
        tc = np.zeros((len(vertices), code_dim), dtype=np.float32)
    else:
        gc = (0.01 * rng.standard_normal((len(vertices), code_dim))).astype(np.float32)
        tc = (0.01 * rng.standard_normal((len(vertices), code_dim))).astype(np.float32)
    scaffold = MeshScaffold(
        vertices=vertices,
        faces=faces,
        geometry_code=gc,
        texture_code=tc,
        sign_indicator=normals.copy(),
        reference_normal=normals,
        radiance_decoder_id=np.zeros(len(vertices), dtype=np.int64),
    )
    scaffold.validate()
    return scaffold


def reference_normals(vertices, faces):
    """Area-weighted vertex normals, normalized to unit length.

    Raises ScaffoldError naming the first vertex with no incident face.
    """
    vertices = np.asarray(vertices, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64)
    if faces.size == 0:
        raise ScaffoldError("mesh has no faces; vertex 0 has no incident face")
    e1 = vertices[faces[:, 1]] - vertices[faces[:, 0]]
    e2 = vertices[faces[:, 2]] - vertices[faces[:, 0]]
    face_n = np.cross(e1, e2)  # (F, 3), |.| = 2 * area
    acc = np.zeros_like(vertices)
    for c in range(3):
        np.add.at(acc, faces[:, c], face_n)
    norms = np.linalg.norm(acc, axis=1)
    counts = np.zeros(len(vertices), dtype=np.int64)
    np.add.at(counts, faces.ravel(), 1)
    if (counts == 0).any():
        bad = int(np.argmax(counts == 0))
        raise ScaffoldError(f"vertex {bad} has no incident face")
    if (norms == 0).any():
        bad = int(np.argmax(norms == 0))
        raise ScaffoldError(f"vertex {bad} has a zero area-weighted normal")
    return (acc / norms[:, None]).astype(np.float32)


def mean_edge_length(vertices, faces):
    vertices = np.asarray(vertices, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64)
    edges = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    edges.sort(axis=1)
    edges = np.unique(edges, axis=0)
    return float(np.linalg.norm(vertices[edges[:, 0]] - vertices[edges[:, 1]], axis=1).mean())


@dataclass
class RayBounds:
    near: float
    far: float
    hit: bool


class SpatialIndex:
    """KNN over vertices (kd-tree) + ray-mesh intersection over faces.

    Read-only after construction. KNN results match brute-force enumeration
    exactly: sorted ascending by distance, ties broken by lowest vertex index.
    """

    def __init__(self, mesh: MeshScaffold):
        mesh.validate()
        if mesh.n_vertices == 0:
            raise ScaffoldError("cannot index an empty mesh")
        self._verts = mesh.vertices.astype(np.float64)
        self._tree = cKDTree(self._verts)
        # packed face geometry for vectorized Moller-Trumbore
        tri = self._verts[mesh.faces]            # (F, 3, 3)
        self._tri_o = tri[:, 0]                  # (F, 3)
        self._tri_e1 = tri[:, 1] - tri[:, 0]
        self._tri_e2 = tri[:, 2] - tri[:, 0]
        self.mean_edge = mean_edge_length(mesh.vertices, mesh.faces) if mesh.n_faces else 0.0
        self._build_face_cells(tri)

    def _build_face_cells(self, tri):
        """Group faces into grid cells with bounding spheres; rays prefilter
        cells before the exact per-face test."""
        n_faces = len(tri)
        if n_faces == 0:
            self._cells = []
            return
        centroid = tri.mean(axis=1)                       # (F, 3)
        circum = np.linalg.norm(tri - centroid[:, None, :], axis=2).max(axis=1)
        lo = centroid.min(axis=0)
        span = centroid.max(axis=0) - lo
        grid_n = max(1, int(np.ceil((n_faces / 48.0) ** (1.0 / 3.0))))
        cell_of = np.clip(((centroid - lo) / np.where(span > 0, span, 1.0)
                           * grid_n).astype(np.int64), 0, grid_n - 1)
        key = (cell_of[:, 0] * grid_n + cell_of[:, 1]) * grid_n + cell_of[:, 2]
        order = np.argsort(key, kind="stable")
        key_sorted = key[order]
        starts = np.nonzero(np.concatenate([[True], np.diff(key_sorted) > 0]))[0]
        ends = np.concatenate([starts[1:], [n_faces]])
        cells = []
        for s, e in zip(starts, ends):
            face_ids = order[s:e]
            center = centroid[face_ids].mean(axis=0)
            radius = (np.linalg.norm(centroid[face_ids] - center, axis=1)
                      + circum[face_ids]).max()
            cells.append((face_ids, center, radius))
        self._cells = cells
        self._cell_centers = np.array([c for _, c, _ in cells])
        self._cell_radii = np.array([r for _, _, r in cells])

    @property
    def n_vertices(self):
        return len(self._verts)

    def knn(self, points, k):
        """K nearest vertices for each query point.

        points: (N, 3). Returns (idx, dist): (N, K') int64 / float64 with
        K' = min(k, V), each row sorted by (distance, vertex index).
        """
        if k < 1:
            raise ValueError("k must be >= 1")
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        n_vert = len(self._verts)
        k_eff = min(k, n_vert)
        _, idx = self._tree.query(points, k=min(k_eff + 1, n_vert), workers=-1)
        idx = np.atleast_2d(idx)
        # recompute distances with the plain formula so ordering and reported
        # values are bit-identical to brute-force enumeration
        d2 = ((self._verts[idx] - points[:, None, :]) ** 2).sum(axis=2)
        if idx.shape[1] > k_eff:
            # boundary tie: the (K+1)-th candidate matches the K-th distance,
            # so membership depends on index order; resolve from the full set
            boundary = d2[:, k_eff - 1] >= d2[:, k_eff]
            if boundary.any():
                sub = points[boundary]
                d2_all = ((self._verts[None, :, :] - sub[:, None, :]) ** 2).sum(axis=2)
                order = np.lexsort((np.broadcast_to(np.arange(n_vert), d2_all.shape), d2_all), axis=1)
                rows = np.nonzero(boundary)[0]
                idx[rows, :k_eff] = order[:, :k_eff]
                d2[rows, :k_eff] = np.take_along_axis(d2_all, order[:, :k_eff], axis=1)
            idx = idx[:, :k_eff]
            d2 = d2[:, :k_eff]
        order = np.lexsort((idx, d2), axis=1)
        idx = np.take_along_axis(idx, order, axis=1)
        d2 = np.take_along_axis(d2, order, axis=1)
        return idx.astype(np.int64), np.sqrt(d2)

    def ray_hits(self, origin, direction):
        """Parameters t of all ray-face intersections (t >= 0), unsorted."""
        origin = np.asarray(origin, dtype=np.float64)
        direction = np.asarray(direction, dtype=np.float64)
        eps = 1e-12
        pvec = np.cross(direction, self._tri_e2)        # (F, 3)
        det = (self._tri_e1 * pvec).sum(axis=1)
        ok = np.abs(det) > eps
        inv_det = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
        tvec = origin - self._tri_o
        u = (tvec * pvec).sum(axis=1) * inv_det
        qvec = np.cross(tvec, self._tri_e1)
        v_par = (direction * qvec).sum(axis=1) * inv_det
        t = (self._tri_e2 * qvec).sum(axis=1) * inv_det
        hit = ok & (u >= -1e-12) & (v_par >= -1e-12) & (u + v_par <= 1 + 1e-12) & (t >= 0)
        return t[hit]

    def _mt_minmax(self, origins, dirs, face_ids):
        """Exact Moller-Trumbore over (rays, faces) -> per-ray (t_min, t_max).

        origins/dirs: (R, 3); face_ids: subset of faces. Misses give +inf/-inf.
        """
        e1 = self._tri_e1[face_ids][None]               # (1, Fc, 3)
        e2 = self._tri_e2[face_ids][None]
        v0 = self._tri_o[face_ids][None]
        d = dirs[:, None, :]
        pvec = np.cross(d, e2)                          # (R, Fc, 3)
        det = (e1 * pvec).sum(-1)
        ok = np.abs(det) > 1e-12
        inv_det = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
        tvec = origins[:, None, :] - v0
        u = (tvec * pvec).sum(-1) * inv_det
        qvec = np.cross(tvec, e1)
        v = (d * qvec).sum(-1) * inv_det
        t = (e2 * qvec).sum(-1) * inv_det
        good = ok & (u >= -1e-12) & (v >= -1e-12) & (u + v <= 1 + 1e-12) & (t >= 0)
        t_min = np.where(good, t, np.inf).min(axis=1)
        t_max = np.where(good, t, -np.inf).max(axis=1)
        return t_min, t_max

    def _bounds_raw(self, origins, dirs):
        """(t_min, t_max, hit) over all faces, cell-prefiltered, chunked."""
        n = len(origins)
        t_min = np.full(n, np.inf)
        t_max = np.full(n, -np.inf)
        if not self._cells:
            return t_min, t_max, np.zeros(n, dtype=bool)
        chunk = 4096
        for s in range(0, n, chunk):
            o = origins[s:s + chunk]
            d = dirs[s:s + chunk]
            co = self._cell_centers[None] - o[:, None]          # (r, C, 3)
            tc = (co * d[:, None]).sum(-1)                      # (r, C)
            d2 = (co * co).sum(-1) - tc * tc
            r = self._cell_radii[None]
            passes = (d2 <= r * r) & (tc >= -r)                 # forward-ray sphere hit
            for ci, (face_ids, _, _) in enumerate(self._cells):
                rows = np.nonzero(passes[:, ci])[0]
                if len(rows) == 0:
                    continue
                lo, hi = self._mt_minmax(o[rows], d[rows], face_ids)
                g = s + rows
                t_min[g] = np.minimum(t_min[g], lo)
                t_max[g] = np.maximum(t_max[g], hi)
        return t_min, t_max, np.isfinite(t_min)

    def ray_bounds(self, origin, direction, margin):
        """Near/far ray-parameter bounds of the mesh along one ray."""
        direction = np.asarray(direction, dtype=np.float64)
        if abs(np.linalg.norm(direction) - 1.0) > 1e-6:
            raise ValueError("ray direction must be unit length")
        t_min, t_max, hit = self._bounds_raw(
            np.asarray(origin, dtype=np.float64)[None], direction[None])
        if not hit[0]:
            return RayBounds(near=0.0, far=0.0, hit=False)
        return RayBounds(near=max(0.0, float(t_min[0]) - margin),
                         far=float(t_max[0]) + margin, hit=True)

    def ray_bounds_batch(self, origins, directions, margin):
        """Vectorized bounds for a batch of rays.

        origins, directions: (N, 3). Returns (near, far, hit) arrays.
        Directions are assumed unit (callers normalize).
        """
        origins = np.asarray(origins, dtype=np.float64)
        directions = np.asarray(directions, dtype=np.float64)
        t_min, t_max, hit = self._bounds_raw(origins, directions)
        near = np.where(hit, np.maximum(0.0, t_min - margin), 0.0)
        far = np.where(hit, t_max + margin, 0.0)
        return near, far, hit


def build_index(mesh: MeshScaffold) -> SpatialIndex:
    return SpatialIndex(mesh)


def knn_query(index: SpatialIndex, x, k):
    """Ordered (vertex_id, distance) list for a single query point."""
    idx, dist = index.knn(np.asarray(x, dtype=np.float64)[None], k)
    return list(zip(idx[0].tolist(), dist[0].tolist()))


def default_margin(mesh: MeshScaffold) -> float:
    """Near/far padding: 2x mean edge length (the SDF band extends past the surface)."""
    return 2.0 * mean_edge_length(mesh.vertices, mesh.faces)


def icosphere(subdivisions=3, radius=1.0):
    """Subdivided icosahedron: (vertices (V,3) float32, faces (F,3) int64).

    subdivisions=3 gives the classic 642-vertex sphere.
    """
    t = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array([
        [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
        [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
        [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
    ], dtype=np.float64)
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    faces = np.array([
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ], dtype=np.int64)
    for _ in range(subdivisions):
        edge_mid = {}
        new_faces = []
        verts_list = list(verts)

        def midpoint(a, b):
            key = (min(a, b), max(a, b))
            if key not in edge_mid:
                m = verts_list[a] + verts_list[b]
                m /= np.linalg.norm(m)
                edge_mid[key] = len(verts_list)
                verts_list.append(m)
            return edge_mid[key]

        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [[a, ab, ca], [ab, b, bc], [ca, bc, c], [ab, bc, ca]]
        verts = np.array(verts_list)
        faces = np.array(new_faces, dtype=np.int64)
    return (verts * radius).astype(np.float32), faces
