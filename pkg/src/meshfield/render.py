"""Ray generation, coarse + importance sampling, and SDF alpha compositing.

Rays carry per-pixel deterministic RNG streams derived by hashing
(seed, pixel index, sample slot), so serial and chunked renders are
bit-identical for the same seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .field import sample_field, sample_sdf


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray      # (3, 3) world-from-camera
    position: np.ndarray      # (3,) camera center in world

    def validate(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        r = np.asarray(self.rotation, dtype=np.float64)
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-6):
            raise ValueError("camera rotation is not orthonormal")

    def ray(self, pixel):
        """Pinhole ray through continuous pixel coordinates (u, v)."""
        u, v = float(pixel[0]), float(pixel[1])
        d = np.array([(u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0])
        d = self.rotation @ (d / np.linalg.norm(d))
        return np.asarray(self.position, dtype=np.float64), d

    def all_rays(self):
        """Rays through every pixel center, row-major. -> (origins, dirs) (H*W, 3)."""
        u = np.arange(self.width) + 0.5
        v = np.arange(self.height) + 0.5
        uu, vv = np.meshgrid(u, v)
        d = np.stack([(uu - self.cx) / self.fx, (vv - self.cy) / self.fy,
                      np.ones_like(uu)], axis=-1).reshape(-1, 3)
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        dirs = d @ np.asarray(self.rotation, dtype=np.float64).T
        origins = np.broadcast_to(np.asarray(self.position, dtype=np.float64),
                                  dirs.shape).copy()
        return origins, dirs

    def to_dict(self):
        pose = np.concatenate([np.asarray(self.rotation, dtype=np.float64),
                               np.asarray(self.position, dtype=np.float64)[:, None]],
                              axis=1)
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height,
                "pose": pose.ravel().tolist()}

    @classmethod
    def from_dict(cls, d):
        pose = np.asarray(d["pose"], dtype=np.float64).reshape(3, 4)
        cam = cls(fx=float(d["fx"]), fy=float(d["fy"]), cx=float(d["cx"]),
                  cy=float(d["cy"]), width=int(d["width"]), height=int(d["height"]),
                  rotation=pose[:, :3].copy(), position=pose[:, 3].copy())
        cam.validate()
        return cam


def generate_ray(camera: Camera, pixel):
    return camera.ray(pixel)


def look_at(eye, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0)):
    """World-from-camera rotation for an OpenCV-style camera (z forward, y down)."""
    eye = np.asarray(eye, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - eye
    z /= np.linalg.norm(z)
    x = np.cross(z, np.asarray(up, dtype=np.float64))
    nx = np.linalg.norm(x)
    if nx < 1e-8:
        x = np.cross(z, np.array([1.0, 0.0, 0.0]))
        nx = np.linalg.norm(x)
    x /= nx
    y = np.cross(z, x)
    return np.stack([x, y, z], axis=1)


def camera_rig(n, radius, image_size, fov_deg=45.0, z_band=0.85, target=(0, 0, 0)):
    """n cameras on a sphere (golden-angle spiral), all looking at the target."""
    h = w = int(image_size)
    f = (h / 2.0) / math.tan(math.radians(fov_deg) / 2.0)
    cams = []
    golden = math.pi * (3.0 - math.sqrt(5.0))
    for i in range(n):
        z = z_band * (1.0 - 2.0 * (i + 0.5) / n)
        r_xy = math.sqrt(max(0.0, 1.0 - z * z))
        theta = golden * i
        eye = radius * np.array([r_xy * math.cos(theta), r_xy * math.sin(theta), z])
        cams.append(Camera(fx=f, fy=f, cx=w / 2.0, cy=h / 2.0, width=w, height=h,
                           rotation=look_at(eye, target), position=eye))
    return cams


@dataclass
class RenderConfig:
    n_coarse: int = 64
    n_fine: int = 64
    background: tuple = (0.0, 0.0, 0.0)
    seed: int = 0
    jitter: bool = True
    ray_chunk: int = 2048

    def validate(self):
        if self.n_coarse < 1 or self.n_fine < 0:
            raise ValueError("sample counts must be >= 1 coarse / >= 0 fine")


# -- deterministic per-(seed, stream, index) uniforms -----------------------

_M = np.uint64(0xFFFFFFFFFFFFFFFF)


def _splitmix64(x):
    with np.errstate(over="ignore"):
        x = (x + np.uint64(0x9E3779B97F4A7C15)) & _M
        x = ((x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)) & _M
        x = ((x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)) & _M
        return x ^ (x >> np.uint64(31))


def hashed_uniform(seed, stream, idx):
    """Uniform [0,1) floats keyed by (seed, stream, element index)."""
    idx = np.asarray(idx, dtype=np.uint64)
    with np.errstate(over="ignore"):
        key = _splitmix64(np.uint64(seed) * np.uint64(0x9E3779B97F4A7C15)
                          ^ np.uint64(stream) + np.uint64(0x632BE59BD9B4E019))
        h = _splitmix64(key ^ idx * np.uint64(0xD1342543DE82EF95))
    return (h >> np.uint64(11)).astype(np.float64) / float(1 << 53)


# -- sampling ----------------------------------------------------------------

def sample_coarse(near, far, n, jitter_u=None):
    """Stratified depths: one sample per equal sub-interval of [near, far].

    near/far: (R,) arrays; jitter_u: (R, n) uniforms in [0, 1) or None for
    midpoints. Returns (R, n), strictly increasing along axis 1.
    """
    near = np.asarray(near, dtype=np.float64)[:, None]
    far = np.asarray(far, dtype=np.float64)[:, None]
    base = np.arange(n, dtype=np.float64)[None, :]
    u = np.full((len(near), n), 0.5) if jitter_u is None else np.asarray(jitter_u)
    return near + (far - near) * (base + u) / n


def composite_t(sdf, colors, s_inv, background=(0, 0, 0)):
    """NeuS-style alpha compositing over batched rays.

    sdf: (R, S) tensor; colors: (R, S, 3) or None; s_inv: scalar tensor/float.
    alpha_i = max((Phi(s_i) - Phi(s_{i+1})) / Phi(s_i), 0) with the logistic
    CDF Phi(x) = sigmoid(s_inv * x); the last sample gets alpha = 0.
    Returns (pixel (R, 3) or None, weights (R, S)).
    """
    if not torch.is_tensor(sdf):
        sdf = torch.as_tensor(sdf)
    s_inv = torch.as_tensor(s_inv, dtype=sdf.dtype)
    phi = torch.sigmoid(s_inv * sdf)
    tiny = torch.finfo(sdf.dtype).tiny
    alpha = torch.clamp((phi[:, :-1] - phi[:, 1:]) / torch.clamp(phi[:, :-1], min=tiny), min=0.0)
    alpha = torch.cat([alpha, torch.zeros_like(alpha[:, :1])], dim=1)   # (R, S)
    trans = torch.cumprod(torch.cat([torch.ones_like(alpha[:, :1]), 1.0 - alpha], dim=1),
                          dim=1)[:, :-1]
    weights = trans * alpha
    if colors is None:
        return None, weights
    if not torch.is_tensor(colors):
        colors = torch.as_tensor(colors, dtype=sdf.dtype)
    bg = torch.as_tensor(background, dtype=sdf.dtype)
    acc = weights.sum(dim=1, keepdim=True)
    pixel = (weights[..., None] * colors).sum(dim=1) + (1.0 - acc) * bg
    return pixel, weights


def composite(sdf_values, colors, s_inv, background=(0, 0, 0)):
    """Single-ray numpy-facing compositing. Returns (rgb, weights)."""
    sdf = torch.as_tensor(np.asarray(sdf_values, dtype=np.float64))[None]
    cols = torch.as_tensor(np.asarray(colors, dtype=np.float64))[None]
    pixel, w = composite_t(sdf, cols, float(s_inv), background)
    return pixel[0].numpy(), w[0].numpy()


def sample_pdf(bins, weights, n_samples, u):
    """Inverse-CDF sampling of piecewise-constant interval weights.

    bins: (R, S) depths; weights: (R, S-1) interval weights; u: (R, n) in [0,1).
    Standard NeRF-style implementation, deterministic in u.
    """
    weights = weights + 1e-5
    pdf = weights / weights.sum(axis=1, keepdims=True)
    cdf = np.concatenate([np.zeros_like(pdf[:, :1]), np.cumsum(pdf, axis=1)], axis=1)
    idx = np.empty(u.shape, dtype=np.int64)
    for r in range(len(u)):            # searchsorted has no batched axis
        idx[r] = np.searchsorted(cdf[r], u[r], side="right")
    below = np.clip(idx - 1, 0, cdf.shape[1] - 1)
    above = np.clip(idx, 0, cdf.shape[1] - 1)
    cdf_b = np.take_along_axis(cdf, below, axis=1)
    cdf_a = np.take_along_axis(cdf, above, axis=1)
    bins_b = np.take_along_axis(bins, np.clip(below, 0, bins.shape[1] - 1), axis=1)
    bins_a = np.take_along_axis(bins, np.clip(above, 0, bins.shape[1] - 1), axis=1)
    denom = np.where(cdf_a - cdf_b < 1e-12, 1.0, cdf_a - cdf_b)
    t = (u - cdf_b) / denom
    return bins_b + t * (bins_a - bins_b)


def upsample_fine(depths, sdf_values, n_fine, s_inv, u):
    """Merge importance samples drawn from the coarse weight distribution.

    depths: (R, S) sorted; sdf_values: (R, S); u: (R, n_fine) uniforms.
    Rays whose coarse weights are all ~zero fall back to stratified
    resampling of [near, far]. Returns (R, S + n_fine), strictly increasing.
    """
    depths = np.asarray(depths, dtype=np.float64)
    _, w = composite_t(torch.as_tensor(np.asarray(sdf_values, dtype=np.float64)),
                       None, float(s_inv))
    w = w.numpy()[:, :-1]                                   # interval weights
    degenerate = w.sum(axis=1) < 1e-12
    fine = sample_pdf(depths, w, n_fine, np.asarray(u))
    if degenerate.any():
        near = depths[degenerate, 0]
        far = depths[degenerate, -1]
        fine[degenerate] = sample_coarse(near, far, n_fine, np.asarray(u)[degenerate])
    merged = np.sort(np.concatenate([depths, fine], axis=1), axis=1)
    # importance samples can land exactly on a coarse knot; bump duplicates
    # by a span-relative epsilon so the output is strictly increasing
    dup = np.diff(merged, axis=1) <= 0
    if dup.any():
        eps = np.maximum(1e-12, 1e-9 * (merged[:, -1:] - merged[:, :1]))
        bump = np.concatenate([np.zeros_like(merged[:, :1]), dup * eps], axis=1)
        merged = merged + np.cumsum(bump, axis=1)
    return merged


# -- full-image rendering ----------------------------------------------------

def render_rays(scene, origins, dirs, cfg: RenderConfig, pixel_ids=None,
                near=None, far=None, ctx=None):
    """Render a batch of rays against a scene. Returns (rgb (R,3), acc (R,)).

    Rays that miss the scaffold return the background with acc 0. pixel_ids
    seed the per-ray jitter streams; defaults to 0..R-1.
    """
    cfg.validate()
    origins = np.asarray(origins, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    n = len(origins)
    if pixel_ids is None:
        pixel_ids = np.arange(n, dtype=np.uint64)
    ctx = ctx if ctx is not None else scene.context()
    if near is None:
        near, far, hit = scene.index.ray_bounds_batch(origins, dirs, scene.margin)
    else:
        hit = np.asarray(far) > np.asarray(near)
    rgb = np.broadcast_to(np.asarray(cfg.background, dtype=np.float64), (n, 3)).copy()
    acc = np.zeros(n)
    live = np.nonzero(hit)[0]
    if len(live) == 0:
        return rgb, acc
    o, d = origins[live], dirs[live]
    ids = np.asarray(pixel_ids, dtype=np.uint64)[live]
    nc, nf = cfg.n_coarse, cfg.n_fine
    if cfg.jitter:
        uc = hashed_uniform(cfg.seed, 1, ids[:, None] * np.uint64(nc)
                            + np.arange(nc, dtype=np.uint64)[None, :])
    else:
        uc = None
    depths = sample_coarse(near[live], far[live], nc, uc)
    s_inv = scene.s_inv
    if nf > 0:
        pts = (o[:, None, :] + d[:, None, :] * depths[..., None]).reshape(-1, 3)
        sdf_c = sample_sdf(ctx, pts).numpy().reshape(len(live), nc)
        uf = hashed_uniform(cfg.seed, 2, ids[:, None] * np.uint64(nf)
                            + np.arange(nf, dtype=np.uint64)[None, :])
        depths = upsample_fine(depths, sdf_c, nf, s_inv, uf)
    n_s = depths.shape[1]
    pts = (o[:, None, :] + d[:, None, :] * depths[..., None]).reshape(-1, 3)
    view = np.repeat(d, n_s, axis=0)
    with torch.no_grad():
        fs = sample_field(ctx, pts, view)
        pix, w = composite_t(fs.sdf.reshape(len(live), n_s),
                             fs.radiance.reshape(len(live), n_s, 3),
                             s_inv, cfg.background)
    rgb[live] = pix.numpy()
    acc[live] = w.sum(dim=1).numpy()
    return rgb, acc


def render_image(scene, camera: Camera, cfg: RenderConfig):
    """Render a full image. Returns (rgb (H, W, 3), opacity (H, W)) float64."""
    camera.validate()
    origins, dirs = camera.all_rays()
    n = len(origins)
    rgb = np.zeros((n, 3))
    acc = np.zeros(n)
    ctx = scene.context()
    near, far, hit = scene.index.ray_bounds_batch(origins, dirs, scene.margin)
    far = np.where(hit, far, near)      # miss -> empty interval
    for s in range(0, n, cfg.ray_chunk):
        sl = slice(s, min(n, s + cfg.ray_chunk))
        rgb[sl], acc[sl] = render_rays(
            scene, origins[sl], dirs[sl], cfg,
            pixel_ids=np.arange(sl.start, sl.stop, dtype=np.uint64),
            near=near[sl], far=np.where(hit[sl], far[sl], near[sl]), ctx=ctx)
    return rgb.reshape(camera.height, camera.width, 3), \
        acc.reshape(camera.height, camera.width)
