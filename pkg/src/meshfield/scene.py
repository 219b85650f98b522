"""Scene: a scaffold plus its decoder table, encoding config, and bookkeeping."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np
import torch

from .field import EncodingConfig, FieldContext
from .nets import DecoderTable, new_decoder_table
from .scaffold import MeshScaffold, SpatialIndex, default_margin, make_scaffold


@dataclass
class Scene:
    scaffold: MeshScaffold
    decoders: DecoderTable
    cfg: EncodingConfig
    seed: int = 0
    step: int = 0
    margin: float = 0.0      # near/far ray-bound padding, scene units
    _index: SpatialIndex | None = field(default=None, repr=False, compare=False)

    @property
    def index(self) -> SpatialIndex:
        if self._index is None:
            self._index = SpatialIndex(self.scaffold)
        return self._index

    def invalidate_index(self):
        self._index = None

    @property
    def s_inv(self) -> float:
        return float(self.decoders.s_inv)

    def copy(self) -> "Scene":
        return Scene(scaffold=self.scaffold.copy(),
                     decoders=copy.deepcopy(self.decoders),
                     cfg=copy.deepcopy(self.cfg),
                     seed=self.seed, step=self.step, margin=self.margin)

    def context(self, dtype=torch.float32, overrides=None) -> FieldContext:
        """Field context with plain tensors built from the scaffold arrays.

        overrides: optional dict mapping attribute name -> torch tensor
        (training passes its nn.Parameters through here).
        """
        overrides = overrides or {}
        decoders = self.decoders
        if dtype != torch.float32:
            decoders = copy.deepcopy(self.decoders).to_dtype(dtype)

        def tensor_of(name, arr):
            t = overrides.get(name)
            return t if t is not None else torch.as_tensor(arr, dtype=dtype)

        return FieldContext(
            cfg=self.cfg,
            index=self.index,
            vertices=tensor_of("vertices", self.scaffold.vertices),
            geometry_code=tensor_of("geometry_code", self.scaffold.geometry_code),
            texture_code=tensor_of("texture_code", self.scaffold.texture_code),
            sign_indicator=tensor_of("sign_indicator", self.scaffold.sign_indicator),
            decoder_ids=self.scaffold.radiance_decoder_id,
            geometry=decoders.geometry,
            radiance=decoders.radiance,
        )


def new_scene(vertices, faces, cfg=None, seed=0, code_init=None) -> Scene:
    """Fresh scene: scaffold attributes and decoders initialized from `seed`."""
    cfg = cfg or EncodingConfig()
    cfg.validate()
    scaffold = make_scaffold(vertices, faces, code_dim=cfg.code_dim,
                             code_init=code_init, seed=seed)
    scene = Scene(scaffold=scaffold,
                  decoders=new_decoder_table(cfg, seed=seed),
                  cfg=cfg, seed=seed)
    scene.margin = default_margin(scaffold)
    return scene
