"""Distillation + fine-tuning training, ablation switches, checkpointing.

Each step samples a batch of rays from random training cameras, renders them
with per-point SDF/color retained, supervises points against the analytic
teacher (distillation) and pixels against the teacher's rendered image
(photometric fine-tuning), adds the sign-indicator and Eikonal regularizers,
and Adam-updates codes, indicators, decoder weights and sharpness. All
randomness flows from the config seed; runs are bit-reproducible.
"""

from __future__ import annotations

import csv
import math
import os
import time
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from .field import sample_field, sample_sdf
from .images import psnr
from .nets import AdamState, adam_step, lr_at
from .render import (RenderConfig, camera_rig, composite_t, render_image,
                     sample_coarse, upsample_fine)
from .teacher import TeacherScene, render_teacher_image, teacher_color, teacher_sdf


@dataclass
class LossWeights:
    lambda_d: float = 1.0
    lambda_f: float = 1.0
    lambda_rs: float = 0.01
    lambda_re: float = 0.01

    def validate(self):
        for name in ("lambda_d", "lambda_f", "lambda_rs", "lambda_re"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


@dataclass
class TrainConfig:
    batch_rays: int = 512
    base_lr: float = 5e-4
    warmup: int = 5000
    total_steps: int = 5000
    seed: int = 0
    learnable_indicators: bool = True
    distill: bool = True
    finetune: bool = True
    checkpoint_every: int = 0        # 0 = final checkpoint only
    ray_chunk: int = 0               # 0 = whole batch at once

    def validate(self):
        if not (self.distill or self.finetune):
            raise ValueError("at least one of distill/finetune must be enabled")
        if self.batch_rays < 1 or self.total_steps < 1:
            raise ValueError("batch_rays and total_steps must be >= 1")


@dataclass
class CameraRigConfig:
    count: int = 100
    radius: float = 3.0
    image_size: int = 128
    fov_deg: float = 45.0
    test_fraction: float = 0.1


def _safe_norm(v, dim=-1):
    return torch.sqrt(torch.clamp((v * v).sum(dim), min=1e-24))


def _as_pair(x, n=None):
    t = torch.as_tensor(np.asarray(x, dtype=np.float64))
    return t


def distill_loss(s, c, s_t, c_t):
    """Sum over points of |s - s_t| + ||c - c_t||_2 (unsquared norms)."""
    s = s if torch.is_tensor(s) else _as_pair(s)
    c = c if torch.is_tensor(c) else _as_pair(c)
    s_t = torch.as_tensor(s_t, dtype=s.dtype) if not torch.is_tensor(s_t) else s_t
    c_t = torch.as_tensor(c_t, dtype=c.dtype) if not torch.is_tensor(c_t) else c_t
    if s.shape != s_t.shape or c.shape != c_t.shape:
        raise ValueError("student/teacher sample lists have mismatched lengths")
    return (s - s_t).abs().sum() + _safe_norm(c - c_t, dim=-1).sum()


def photometric_loss(rendered, target):
    """Sum over rays of squared L2 pixel error."""
    r = rendered if torch.is_tensor(rendered) else _as_pair(rendered)
    t = torch.as_tensor(target, dtype=r.dtype) if not torch.is_tensor(target) else target
    if r.shape != t.shape:
        raise ValueError("rendered/target pixel lists have mismatched lengths")
    return ((r - t) ** 2).sum()


def sign_regularizer(indicators, reference_normals):
    """Sum of squared deviation of indicators from the reference normals."""
    ind = indicators if torch.is_tensor(indicators) else _as_pair(indicators)
    ref = torch.as_tensor(reference_normals, dtype=ind.dtype) \
        if not torch.is_tensor(reference_normals) else reference_normals
    if ind.shape != ref.shape:
        raise ValueError("indicator/normal lists have mismatched lengths")
    return ((ind - ref) ** 2).sum()


def eikonal_regularizer(gradients):
    """Sum of (||grad s|| - 1)^2 over sample points."""
    g = gradients if torch.is_tensor(gradients) else _as_pair(gradients)
    return ((_safe_norm(g, dim=-1) - 1.0) ** 2).sum()


def total_loss(parts, weights: LossWeights, flags):
    """Weighted sum with ablation-disabled terms contributing zero.

    parts: dict with any of distill/photometric/sign/eikonal; flags: object
    or dict with distill/finetune booleans.
    """
    get = (lambda k: flags.get(k)) if isinstance(flags, dict) else (lambda k: getattr(flags, k))
    total = 0.0
    if get("distill") and "distill" in parts:
        total = total + weights.lambda_d * parts["distill"]
    if get("finetune") and "photometric" in parts:
        total = total + weights.lambda_f * parts["photometric"]
    if "sign" in parts:
        total = total + weights.lambda_rs * parts["sign"]
    if "eikonal" in parts:
        total = total + weights.lambda_re * parts["eikonal"]
    return total


class TrainingData:
    """Per-training-camera caches: teacher image, ray dirs, bounds, hit pixels."""

    def __init__(self, teacher: TeacherScene, scene, cameras, background):
        self.cameras = cameras
        self.origins, self.dirs, self.targets = [], [], []
        self.near, self.far, self.hit_pixels = [], [], []
        index, margin = scene.index, scene.margin
        for cam in cameras:
            o, d = cam.all_rays()
            img, _ = render_teacher_image(teacher, cam, background=background)
            near, far, hit = index.ray_bounds_batch(o, d, margin)
            keep = np.nonzero(hit)[0]
            self.origins.append(o[0])
            self.dirs.append(d)
            self.targets.append(img.reshape(-1, 3))
            self.near.append(near)
            self.far.append(far)
            self.hit_pixels.append(keep)


def make_batch(data: TrainingData, ctx, s_inv, teacher, tcfg: TrainConfig,
               rcfg: RenderConfig, step, dtype=torch.float32):
    """Frozen training batch: rays, sample depths, teacher values, targets.

    Depth sampling (stratified jitter + importance upsampling) happens here,
    outside the differentiable path; loss_on_batch is a pure function of the
    parameters given the returned batch.
    """
    rng = np.random.default_rng([tcfg.seed, step])
    n_cam = len(data.cameras)
    b = tcfg.batch_rays
    cam_idx = rng.integers(0, n_cam, b)
    pick = rng.random(b)
    uc = rng.random((b, rcfg.n_coarse))
    uf = rng.random((b, rcfg.n_fine)) if rcfg.n_fine > 0 else None

    origins = np.empty((b, 3))
    dirs = np.empty((b, 3))
    near = np.empty(b)
    far = np.empty(b)
    target = np.empty((b, 3))
    for ci in np.unique(cam_idx):
        rows = np.nonzero(cam_idx == ci)[0]
        hp = data.hit_pixels[ci]
        pix = hp[(pick[rows] * len(hp)).astype(np.int64)]
        origins[rows] = data.origins[ci]
        dirs[rows] = data.dirs[ci][pix]
        near[rows] = data.near[ci][pix]
        far[rows] = data.far[ci][pix]
        target[rows] = data.targets[ci][pix]

    depths = sample_coarse(near, far, rcfg.n_coarse, uc if rcfg.jitter else None)
    if rcfg.n_fine > 0:
        pts = origins[:, None, :] + dirs[:, None, :] * depths[..., None]
        sdf_c = sample_sdf(ctx, pts.reshape(-1, 3)).numpy().reshape(b, rcfg.n_coarse)
        depths = upsample_fine(depths, sdf_c, rcfg.n_fine, s_inv, uf)
    n_s = depths.shape[1]
    points = origins[:, None, :] + dirs[:, None, :] * depths[..., None]
    view = np.repeat(dirs, n_s, axis=0)
    batch = {
        "n_rays": b, "n_samples": n_s,
        "points": points.reshape(-1, 3),
        "view": view,
        "target": torch.as_tensor(target, dtype=dtype),
    }
    if tcfg.distill:
        batch["teacher_sdf"] = torch.as_tensor(
            teacher_sdf(teacher, batch["points"]), dtype=dtype)
        batch["teacher_color"] = torch.as_tensor(
            teacher_color(teacher, batch["points"], view), dtype=dtype)
    return batch


def loss_on_batch(ctx, log_sharpness, reference_normals, batch,
                  weights: LossWeights, tcfg: TrainConfig, background=(0, 0, 0)):
    """Differentiable total loss for one frozen batch. Returns (total, parts)."""
    b, n_s = batch["n_rays"], batch["n_samples"]
    fs = sample_field(ctx, batch["points"], batch["view"], create_graph=True)
    parts = {}
    if tcfg.distill:
        parts["distill"] = distill_loss(fs.sdf, fs.radiance,
                                        batch["teacher_sdf"], batch["teacher_color"])
    pixel, _ = composite_t(fs.sdf.reshape(b, n_s), fs.radiance.reshape(b, n_s, 3),
                           torch.exp(log_sharpness), background)
    if tcfg.finetune:
        parts["photometric"] = photometric_loss(pixel, batch["target"])
    parts["sign"] = sign_regularizer(ctx.sign_indicator, reference_normals)
    parts["eikonal"] = eikonal_regularizer(fs.sdf_gradient)
    return total_loss(parts, weights, tcfg), parts


def build_cameras(rig: CameraRigConfig, seed):
    """Deterministic rig split into (train_cams, test_cams)."""
    cams = camera_rig(rig.count, rig.radius, rig.image_size, rig.fov_deg)
    order = np.random.default_rng([seed, 424242]).permutation(rig.count)
    n_test = max(1, int(round(rig.count * rig.test_fraction)))
    test = sorted(order[:n_test].tolist())
    tr = sorted(order[n_test:].tolist())
    return [cams[i] for i in tr], [cams[i] for i in test]


def trainable_parameters(scene, tcfg: TrainConfig, dtype=torch.float32):
    """(overrides, named parameter list) lifting scene state into torch."""
    sc = scene.scaffold
    named = []
    overrides = {}
    for name in ("geometry_code", "texture_code"):
        p = torch.nn.Parameter(torch.as_tensor(getattr(sc, name), dtype=dtype))
        overrides[name] = p
        named.append((name, p))
    ind = torch.as_tensor(sc.sign_indicator, dtype=dtype)
    if tcfg.learnable_indicators:
        p = torch.nn.Parameter(ind)
        overrides["sign_indicator"] = p
        named.append(("sign_indicator", p))
    else:
        overrides["sign_indicator"] = ind
    scene.decoders.to_dtype(dtype)
    scene.decoders.log_sharpness.requires_grad_(True)
    named.append(("sharpness", scene.decoders.log_sharpness))
    for pname, p in scene.decoders.geometry.named_parameters():
        named.append((f"geometry_mlp.{pname}", p))
    for i, r in enumerate(scene.decoders.radiance):
        for pname, p in r.named_parameters():
            named.append((f"radiance_mlp_{i}.{pname}", p))
    return overrides, named


def write_back(scene, overrides):
    """Copy trained tensors back into the numpy scaffold."""
    sc = scene.scaffold
    for name in ("geometry_code", "texture_code", "sign_indicator"):
        t = overrides[name]
        setattr(sc, name, t.detach().cpu().numpy().astype(np.float32))


def train(teacher: TeacherScene, scene, tcfg: TrainConfig, rcfg: RenderConfig,
          rig: CameraRigConfig = None, weights: LossWeights = None,
          out_dir=None, log_every=50, progress=None):
    """Run the full training loop on `scene` in place; returns the scene.

    Emits losses.csv and periodic checkpoints into out_dir when given.
    Aborts with a diagnostic naming the step and loss term on NaN.
    """
    tcfg.validate()
    rcfg.validate()
    rig = rig or CameraRigConfig()
    weights = weights or LossWeights()
    weights.validate()
    train_cams, _ = build_cameras(rig, tcfg.seed)
    data = TrainingData(teacher, scene, train_cams, rcfg.background)
    overrides, named = trainable_parameters(scene, tcfg)
    params = [p for _, p in named]
    names = [n for n, _ in named]
    ctx = scene.context(overrides=overrides)
    ref_normals = torch.as_tensor(scene.scaffold.reference_normal, dtype=torch.float32)
    state = AdamState(params)
    rows = []
    csv_path = os.path.join(out_dir, "losses.csv") if out_dir else None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    t_start = time.time()
    for step in range(tcfg.total_steps):
        lr = lr_at(step, tcfg.base_lr, tcfg.warmup, tcfg.total_steps)
        with torch.no_grad():
            s_inv_now = float(torch.exp(scene.decoders.log_sharpness))
        batch = make_batch(data, ctx, s_inv_now, teacher, tcfg, rcfg, step)
        total, parts = loss_on_batch(ctx, scene.decoders.log_sharpness,
                                     ref_normals, batch, weights, tcfg,
                                     rcfg.background)
        for term, value in parts.items():
            if not torch.isfinite(value):
                raise FloatingPointError(
                    f"non-finite loss at step {step}: term {term!r} = {float(value)}")
        for p in params:
            p.grad = None
        total.backward()
        adam_step(params, [p.grad for p in params], state, lr, names=names)
        row = {"step": step, "lr": lr, "total": float(total)}
        for key, col in (("distill", "L_d"), ("photometric", "L_f"),
                         ("sign", "L_rs"), ("eikonal", "L_re")):
            row[col] = float(parts[key]) if key in parts else 0.0
        rows.append(row)
        if progress and (step % log_every == 0 or step == tcfg.total_steps - 1):
            progress(f"step {step:5d}  lr {lr:.3e}  total {row['total']:.4f}  "
                     f"L_d {row['L_d']:.4f}  L_f {row['L_f']:.4f}  "
                     f"[{time.time() - t_start:.0f}s]")
        if out_dir and tcfg.checkpoint_every and (step + 1) % tcfg.checkpoint_every == 0 \
                and step + 1 < tcfg.total_steps:
            write_back(scene, overrides)
            scene.step = step + 1
            _save(scene, os.path.join(out_dir, f"ckpt_{step + 1:06d}.msfc"))
    write_back(scene, overrides)
    scene.step = tcfg.total_steps
    scene.decoders.log_sharpness.requires_grad_(False)
    if out_dir:
        _save(scene, os.path.join(out_dir, "checkpoint.msfc"))
    if csv_path:
        with open(csv_path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["step", "L_d", "L_f", "L_rs",
                                               "L_re", "total", "lr"])
            w.writeheader()
            for row in rows:
                w.writerow({k: (f"{v:.8g}" if isinstance(v, float) else v)
                            for k, v in row.items()})
    return scene, rows


def _save(scene, path):
    from .checkpoint import save_checkpoint_file
    save_checkpoint_file(scene, path)


def evaluate_psnr(scene, teacher: TeacherScene, cameras, rcfg: RenderConfig):
    """Mean/per-view PSNR of scene renders against analytic teacher renders."""
    values = []
    for cam in cameras:
        img, _ = render_image(scene, cam, rcfg)
        ref, _ = render_teacher_image(teacher, cam, background=rcfg.background)
        values.append(psnr(img, ref))
    return float(np.mean(values)), values
