"""Image IO (8-bit PNG, binary PPM, grayscale PNG) and PSNR."""

from __future__ import annotations

import math

import numpy as np
from PIL import Image

PSNR_IDENTICAL = float("inf")


def to_u8(img):
    return np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def save_png(path, img):
    """img: (H, W, 3) float in [0, 1]."""
    Image.fromarray(to_u8(img), mode="RGB").save(path)


def load_png(path):
    """-> (H, W, 3) float64 in [0, 1]."""
    img = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64)
    return img / 255.0


def save_gray_png(path, img):
    """img: (H, W) float in [0, 1]."""
    Image.fromarray(to_u8(img), mode="L").save(path)


def load_gray_png(path):
    img = np.asarray(Image.open(path).convert("L"), dtype=np.float64)
    return img / 255.0


def save_ppm(path, img):
    """Lossless 8-bit binary PPM (P6)."""
    u8 = to_u8(img)
    h, w = u8.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(u8.tobytes())


def load_ppm(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(b"P6"):
        raise ValueError(f"{path}: not a binary PPM")
    parts = data.split(maxsplit=4)
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 supported")
    pix = np.frombuffer(parts[4][:w * h * 3], dtype=np.uint8).reshape(h, w, 3)
    return pix.astype(np.float64) / 255.0


def psnr(image_a, image_b):
    """10*log10(1/MSE) over [0,1] RGB; identical images -> inf sentinel."""
    a = np.asarray(image_a, dtype=np.float64)
    b = np.asarray(image_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_IDENTICAL
    return 10.0 * math.log10(1.0 / mse)
