"""Full classifier: encoder plus recurrent head, with one parameter namespace."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import head as head_mod
from . import vit as vit_mod
from .errors import ConfigError
from .head import HeadConfig, HeadParams, init_head_params
from .rng import substream
from .tensor import Tape, Tensor
from .vit import FreezePartition, ViTConfig, ViTParams, apply_freeze, init_vit_params

DTYPES = {"float32": np.float32, "float64": np.float64}


@dataclass(frozen=True)
class ModelConfig:
    vit: ViTConfig = field(default_factory=ViTConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    dtype: str = "float32"

    def __post_init__(self):
        if self.head.d_vit != self.vit.d_model:
            raise ConfigError(
                f"head.d_vit ({self.head.d_vit}) must equal vit.d_model ({self.vit.d_model})"
            )
        if self.dtype not in DTYPES:
            raise ConfigError(f"dtype must be one of {sorted(DTYPES)}, got {self.dtype!r}")

    @property
    def np_dtype(self):
        return DTYPES[self.dtype]


def config_hash(config: ModelConfig) -> str:
    """Stable digest of the architecture; checkpoints refuse to load across it."""
    canonical = json.dumps(asdict(config), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


class Model:
    """Parameter set plus the forward pass from image to logits."""

    def __init__(self, config: ModelConfig, seed: int = 0, freeze: bool = True):
        self.config = config
        rng = substream(seed, "init")
        self.vit_params: ViTParams = init_vit_params(config.vit, rng, config.np_dtype)
        self.head_params: HeadParams = init_head_params(config.head, rng, config.np_dtype)
        self.partition: FreezePartition | None = None
        if freeze:
            self.partition = apply_freeze(self.vit_params, config.vit)

    # ------------------------------------------------------------------ #
    # parameters

    def named_parameters(self) -> dict[str, Tensor]:
        out = dict(self.vit_params.named())
        out.update(self.head_params.named())
        return out

    def trainable_parameters(self) -> dict[str, Tensor]:
        return {n: t for n, t in self.named_parameters().items() if t.requires_grad}

    def frozen_parameters(self) -> dict[str, Tensor]:
        return {n: t for n, t in self.named_parameters().items() if not t.requires_grad}

    def config_hash(self) -> str:
        return config_hash(self.config)

    def zero_grad(self) -> None:
        for t in self.named_parameters().values():
            t.grad = None

    # ------------------------------------------------------------------ #
    # forward

    def _image_tensor(self, image) -> Tensor:
        data = image.data if isinstance(image, Tensor) else np.asarray(image)
        return Tensor(data.astype(self.config.np_dtype, copy=False))

    def forward_pooled(self, tape: Tape, image) -> tuple[Tensor, Tensor]:
        """(pooled feature vector, logits) for one image."""
        patches = vit_mod.patchify(self._image_tensor(image), self.config.vit)
        z0 = vit_mod.embed(tape, patches, self.vit_params, self.config.vit)
        z_vit = vit_mod.encoder_forward(tape, z0, self.vit_params, self.config.vit)
        z_bridge = head_mod.bridge_project(tape, z_vit, self.head_params)
        states = head_mod.bigru_forward(tape, z_bridge, self.head_params)
        pooled = head_mod.mean_pool(tape, states)
        logits = head_mod.classify(tape, pooled, self.head_params)
        return pooled, logits

    def forward(self, tape: Tape, image) -> Tensor:
        """Logits for one image; shape [num_classes]."""
        return self.forward_pooled(tape, image)[1]
