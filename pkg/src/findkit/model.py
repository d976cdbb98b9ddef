"""Parameter bundle shared by all tasks."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .encoders import encode_image, init_encoder_params, init_query_pool
from .interface import InterfaceConfig, init_interface_params
from .taskspec import builtin_tasks


def query_kinds() -> list:
    kinds = []
    for t in builtin_tasks():
        for _, k in t.queries:
            if k not in kinds:
                kinds.append(k)
    return kinds


def init_params(cfg: InterfaceConfig, seed: int = 0) -> dict:
    """Every learnable tensor, keyed by a stable dotted name, in a fixed order."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    params = {}
    params.update(init_encoder_params(cfg.d))
    params.update(init_query_pool(cfg.d, cfg.n_obj, query_kinds(), rng))
    params.update(init_interface_params(cfg, rng))
    return params


@dataclass
class FindModel:
    params: dict
    cfg: InterfaceConfig = field(default_factory=InterfaceConfig)
    image_encoder: object = None     # optional EmbeddingStore

    @classmethod
    def create(cls, cfg: InterfaceConfig | None = None, seed: int = 0) -> "FindModel":
        cfg = cfg or InterfaceConfig()
        return cls(init_params(cfg, seed), cfg)

    def encode_image(self, scene):
        if self.image_encoder is not None:
            return self.image_encoder.encode_image(scene, self.params)
        return encode_image(scene, self.params)
