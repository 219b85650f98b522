"""Flat binary checkpoint: one versioned container for a whole scene.

Layout: magic, version, section count, then named sections. Each section is
either JSON metadata or a little-endian ndarray (float32 / int32). Sections
are written in a canonical order so save -> load -> save is byte-identical.
"""

from __future__ import annotations

import io
import json
import struct

import numpy as np
import torch

from .field import EncodingConfig
from .nets import MLP, DecoderTable, geometry_dims, radiance_dims
from .scaffold import MeshScaffold
from .scene import Scene

MAGIC = b"MSFC"
VERSION = 1

_KIND_META = 0
_KIND_ARRAY = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<i4")}
_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<i4"): 1}


class CheckpointError(ValueError):
    pass


def _write_section(buf, name, payload):
    nb = name.encode("utf-8")
    buf.write(struct.pack("<B", len(nb)))
    buf.write(nb)
    if isinstance(payload, dict):
        raw = json.dumps(payload, sort_keys=True).encode("utf-8")
        buf.write(struct.pack("<BI", _KIND_META, len(raw)))
        buf.write(raw)
    else:
        arr = np.ascontiguousarray(payload)
        if arr.dtype not in _DTYPE_CODES:
            raise CheckpointError(f"section {name}: unsupported dtype {arr.dtype}")
        buf.write(struct.pack("<BBB", _KIND_ARRAY, _DTYPE_CODES[arr.dtype], arr.ndim))
        for d in arr.shape:
            buf.write(struct.pack("<I", d))
        buf.write(arr.tobytes())


class _Reader:
    def __init__(self, data):
        self.data = data
        self.off = 0

    def take(self, n, what):
        if self.off + n > len(self.data):
            raise CheckpointError(f"truncated checkpoint while reading {what}")
        out = self.data[self.off:self.off + n]
        self.off += n
        return out

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def _read_section(r: _Reader):
    (nlen,) = r.unpack("<B", "section name length")
    name = r.take(nlen, "section name").decode("utf-8")
    (kind,) = r.unpack("<B", f"section {name} kind")
    if kind == _KIND_META:
        (ln,) = r.unpack("<I", f"section {name} length")
        return name, json.loads(r.take(ln, f"section {name}").decode("utf-8"))
    if kind == _KIND_ARRAY:
        dcode, ndim = r.unpack("<BB", f"section {name} array header")
        if dcode not in _DTYPES:
            raise CheckpointError(f"section {name}: unknown dtype code {dcode}")
        shape = tuple(r.unpack("<" + "I" * ndim, f"section {name} shape")) if ndim else ()
        dtype = _DTYPES[dcode]
        count = int(np.prod(shape)) if shape else 1
        raw = r.take(count * dtype.itemsize, f"section {name} payload")
        return name, np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
    raise CheckpointError(f"section {name}: unknown kind {kind}")


def _decoder_blob(mlp: MLP):
    return mlp.flat_parameters().astype("<f4")


def save_checkpoint(scene: Scene) -> bytes:
    """Serialize a scene to the flat binary container."""
    sc = scene.scaffold
    cfg = scene.cfg
    header = {
        "format_version": VERSION,
        "code_dim": cfg.code_dim,
        "k": cfg.k,
        "omega_n": cfg.omega_n,
        "distance_epsilon": cfg.distance_epsilon,
        "freq_h": cfg.freq_h,
        "freq_code": cfg.freq_code,
        "freq_dir": cfg.freq_dir,
        "decoder_layout": {
            "order": "[encoded code, encoded signed distance, encoded direction, raw sdf gradient]",
            "geometry_dims": scene.decoders.geometry.dims,
            "geometry_activation": scene.decoders.geometry.activation,
            "radiance_dims": [r.dims for r in scene.decoders.radiance],
            "radiance_activation": "relu+sigmoid",
            "blob": "per layer: weight (out x in) row-major, then bias",
        },
        "n_vertices": sc.n_vertices,
        "n_faces": sc.n_faces,
        "n_radiance_decoders": len(scene.decoders.radiance),
        "step": scene.step,
        "seed": scene.seed,
        "margin": scene.margin,
        "sharpness_parameterization": "s_inv = exp(stored value)",
    }
    buf = io.BytesIO()
    buf.write(MAGIC)
    sections = [
        ("header", header),
        ("vertices", sc.vertices.astype("<f4")),
        ("faces", sc.faces.astype("<i4")),
        ("geometry_code", sc.geometry_code.astype("<f4")),
        ("texture_code", sc.texture_code.astype("<f4")),
        ("sign_indicator", sc.sign_indicator.astype("<f4")),
        ("reference_normal", sc.reference_normal.astype("<f4")),
        ("decoder_id", sc.radiance_decoder_id.astype("<i4")),
        ("sharpness", np.array([float(scene.decoders.log_sharpness)], dtype="<f4")),
        ("geometry_mlp", _decoder_blob(scene.decoders.geometry)),
    ]
    for i, r in enumerate(scene.decoders.radiance):
        sections.append((f"radiance_mlp_{i}", _decoder_blob(r)))
    buf.write(struct.pack("<II", VERSION, len(sections)))
    for name, payload in sections:
        _write_section(buf, name, payload)
    return buf.getvalue()


_KNOWN = {"header", "vertices", "faces", "geometry_code", "texture_code",
          "sign_indicator", "reference_normal", "decoder_id", "sharpness",
          "geometry_mlp"}


def load_checkpoint(data: bytes) -> Scene:
    """Rebuild a scene from container bytes, validating against the header."""
    r = _Reader(data)
    if r.take(4, "magic") != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    version, n_sections = r.unpack("<II", "version")
    if version != VERSION:
        raise CheckpointError(f"checkpoint version {version} != supported {VERSION}")
    sections = {}
    for _ in range(n_sections):
        name, payload = _read_section(r)
        if name not in _KNOWN and not name.startswith("radiance_mlp_"):
            raise CheckpointError(f"unknown section {name!r}")
        sections[name] = payload
    if "header" not in sections:
        raise CheckpointError("missing header section")
    h = sections["header"]

    def need(name):
        if name not in sections:
            raise CheckpointError(f"missing section {name!r}")
        return sections[name]

    nv, nf = int(h["n_vertices"]), int(h["n_faces"])
    code_dim = int(h["code_dim"])
    expect = {
        "vertices": (nv, 3), "faces": (nf, 3),
        "geometry_code": (nv, code_dim), "texture_code": (nv, code_dim),
        "sign_indicator": (nv, 3), "reference_normal": (nv, 3),
        "decoder_id": (nv,), "sharpness": (1,),
    }
    for name, shape in expect.items():
        arr = need(name)
        if arr.shape != shape:
            raise CheckpointError(
                f"section {name!r}: shape {arr.shape} inconsistent with header {shape}")
    cfg = EncodingConfig(k=int(h["k"]), omega_n=float(h["omega_n"]),
                         freq_h=int(h["freq_h"]), freq_code=int(h["freq_code"]),
                         freq_dir=int(h["freq_dir"]),
                         distance_epsilon=float(h["distance_epsilon"]),
                         code_dim=code_dim)
    layout = h["decoder_layout"]
    geometry = MLP(layout["geometry_dims"], activation=layout["geometry_activation"])
    geometry.load_flat(need("geometry_mlp"))
    n_rad = int(h["n_radiance_decoders"])
    radiance = []
    for i in range(n_rad):
        mlp = MLP(layout["radiance_dims"][i], activation="relu")
        mlp.load_flat(need(f"radiance_mlp_{i}"))
        radiance.append(mlp)
    dec_id = need("decoder_id").astype(np.int64)
    if dec_id.size and dec_id.max() >= n_rad:
        raise CheckpointError("section 'decoder_id': index beyond decoder table")
    scaffold = MeshScaffold(
        vertices=need("vertices").astype(np.float32),
        faces=need("faces").astype(np.int64),
        geometry_code=need("geometry_code").astype(np.float32),
        texture_code=need("texture_code").astype(np.float32),
        sign_indicator=need("sign_indicator").astype(np.float32),
        reference_normal=need("reference_normal").astype(np.float32),
        radiance_decoder_id=dec_id,
    )
    scaffold.validate()
    table = DecoderTable(geometry=geometry, radiance=radiance,
                         log_sharpness=torch.tensor(float(need("sharpness")[0]),
                                                    dtype=torch.float32))
    return Scene(scaffold=scaffold, decoders=table, cfg=cfg,
                 seed=int(h["seed"]), step=int(h["step"]),
                 margin=float(h["margin"]))


def save_checkpoint_file(scene: Scene, path):
    data = save_checkpoint(scene)
    with open(path, "wb") as fh:
        fh.write(data)
    return len(data)


def load_checkpoint_file(path) -> Scene:
    with open(path, "rb") as fh:
        return load_checkpoint(fh.read())
