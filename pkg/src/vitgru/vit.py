"""Patch-based transformer encoder with a freezable lower stack.

An image enters as a [S x S x C] array, is cut into non-overlapping patches,
linearly embedded with per-position offsets (plus an optional leading class
token), and pushed through pre-norm transformer blocks. The class-token row
is dropped from the output, so the encoder always returns one feature row per
patch. The patch projection, position table, class token, and the first
``freeze_n`` blocks can be excluded from training in one call.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor import Tape, Tensor, linear

LN_EPS = 1e-6


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 224
    patch_size: int = 16
    channels: int = 3
    d_model: int = 768
    depth: int = 12
    heads: int = 12
    mlp_width: int = 3072
    freeze_n: int = 6
    use_cls_token: bool = True

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ShapeError(
                f"image_size {self.image_size} is not divisible by patch_size {self.patch_size}"
            )
        if self.d_model % self.heads != 0:
            raise ShapeError(f"d_model {self.d_model} is not divisible by heads {self.heads}")
        if not 0 <= self.freeze_n <= self.depth:
            raise ConfigError(f"freeze_n must lie in [0, depth={self.depth}], got {self.freeze_n}")
        for name in ("image_size", "patch_size", "channels", "d_model", "depth", "heads", "mlp_width"):
            if getattr(self, name) < (0 if name == "depth" else 1):
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    @property
    def num_tokens(self) -> int:
        return self.num_patches + (1 if self.use_cls_token else 0)


@dataclass
class BlockParams:
    ln1_gamma: Tensor
    ln1_beta: Tensor
    q_w: Tensor
    q_b: Tensor
    k_w: Tensor
    k_b: Tensor
    v_w: Tensor
    v_b: Tensor
    o_w: Tensor
    o_b: Tensor
    ln2_gamma: Tensor
    ln2_beta: Tensor
    fc_in_w: Tensor
    fc_in_b: Tensor
    fc_out_w: Tensor
    fc_out_b: Tensor

    _FIELD_KEYS = (
        ("ln1_gamma", "ln1.gamma"),
        ("ln1_beta", "ln1.beta"),
        ("q_w", "attn.q_proj.weight"),
        ("q_b", "attn.q_proj.bias"),
        ("k_w", "attn.k_proj.weight"),
        ("k_b", "attn.k_proj.bias"),
        ("v_w", "attn.v_proj.weight"),
        ("v_b", "attn.v_proj.bias"),
        ("o_w", "attn.out_proj.weight"),
        ("o_b", "attn.out_proj.bias"),
        ("ln2_gamma", "ln2.gamma"),
        ("ln2_beta", "ln2.beta"),
        ("fc_in_w", "mlp.fc_in.weight"),
        ("fc_in_b", "mlp.fc_in.bias"),
        ("fc_out_w", "mlp.fc_out.weight"),
        ("fc_out_b", "mlp.fc_out.bias"),
    )

    def named(self, prefix: str):
        for attr, key in self._FIELD_KEYS:
            yield f"{prefix}.{key}", getattr(self, attr)

    def tensors(self) -> list[Tensor]:
        return [getattr(self, attr) for attr, _ in self._FIELD_KEYS]


@dataclass
class ViTParams:
    patch_w: Tensor
    patch_b: Tensor
    pos: Tensor
    cls: Tensor | None
    blocks: list[BlockParams] = field(default_factory=list)

    def named(self, prefix: str = "vit"):
        yield f"{prefix}.patch_embed.weight", self.patch_w
        yield f"{prefix}.patch_embed.bias", self.patch_b
        yield f"{prefix}.pos_embed", self.pos
        if self.cls is not None:
            yield f"{prefix}.cls_token", self.cls
        for i, block in enumerate(self.blocks):
            yield from block.named(f"{prefix}.block.{i}")


def _uniform(rng: np.random.Generator, fan_in: int, shape, dtype) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def init_vit_params(config: ViTConfig, rng: np.random.Generator, dtype=np.float32) -> ViTParams:
    """Fresh parameters: uniform fan-in weights, zero biases, unit layer-norm scales."""
    d = config.d_model
    params = ViTParams(
        patch_w=Tensor(_uniform(rng, config.patch_dim, (d, config.patch_dim), dtype)),
        patch_b=Tensor(np.zeros(d, dtype=dtype)),
        pos=Tensor((rng.normal(size=(config.num_tokens, d)) * 0.02).astype(dtype)),
        cls=Tensor((rng.normal(size=d) * 0.02).astype(dtype)) if config.use_cls_token else None,
    )
    for _ in range(config.depth):
        params.blocks.append(
            BlockParams(
                ln1_gamma=Tensor(np.ones(d, dtype=dtype)),
                ln1_beta=Tensor(np.zeros(d, dtype=dtype)),
                q_w=Tensor(_uniform(rng, d, (d, d), dtype)),
                q_b=Tensor(np.zeros(d, dtype=dtype)),
                k_w=Tensor(_uniform(rng, d, (d, d), dtype)),
                k_b=Tensor(np.zeros(d, dtype=dtype)),
                v_w=Tensor(_uniform(rng, d, (d, d), dtype)),
                v_b=Tensor(np.zeros(d, dtype=dtype)),
                o_w=Tensor(_uniform(rng, d, (d, d), dtype)),
                o_b=Tensor(np.zeros(d, dtype=dtype)),
                ln2_gamma=Tensor(np.ones(d, dtype=dtype)),
                ln2_beta=Tensor(np.zeros(d, dtype=dtype)),
                fc_in_w=Tensor(_uniform(rng, d, (config.mlp_width, d), dtype)),
                fc_in_b=Tensor(np.zeros(config.mlp_width, dtype=dtype)),
                fc_out_w=Tensor(_uniform(rng, config.mlp_width, (d, config.mlp_width), dtype)),
                fc_out_b=Tensor(np.zeros(d, dtype=dtype)),
            )
        )
    for name, tensor in params.named():
        tensor.name = name
        tensor.requires_grad = True
    return params


def patchify(image, config: ViTConfig) -> Tensor:
    """Cut [S x S x C] into [P x (ps*ps*C)]; row i is patch i in row-major grid order.

    Each row flattens its patch in (y, x, channel) order, so ``unpatchify``
    restores the image bit-exactly.
    """
    data = image.data if isinstance(image, Tensor) else np.asarray(image)
    expected = (config.image_size, config.image_size, config.channels)
    if data.shape != expected:
        raise ShapeError(f"image has shape {data.shape}, config expects {expected}")
    g, ps, c = config.grid, config.patch_size, config.channels
    rows = (
        data.reshape(g, ps, g, ps, c)
        .transpose(0, 2, 1, 3, 4)
        .reshape(config.num_patches, config.patch_dim)
    )
    return Tensor(np.ascontiguousarray(rows))


def unpatchify(rows, config: ViTConfig) -> np.ndarray:
    """Inverse of patchify."""
    data = rows.data if isinstance(rows, Tensor) else np.asarray(rows)
    if data.shape != (config.num_patches, config.patch_dim):
        raise ShapeError(
            f"patch rows have shape {data.shape}, config expects {(config.num_patches, config.patch_dim)}"
        )
    g, ps, c = config.grid, config.patch_size, config.channels
    s = config.image_size
    return data.reshape(g, g, ps, ps, c).transpose(0, 2, 1, 3, 4).reshape(s, s, c)


def embed(tape: Tape, patches: Tensor, params: ViTParams, config: ViTConfig) -> Tensor:
    """Project patch rows to model width, prepend the class token, add positions."""
    if patches.shape[1] != params.patch_w.shape[1]:
        raise ShapeError(
            f"patch rows have width {patches.shape[1]}, projection expects {params.patch_w.shape[1]}"
        )
    tokens = linear(tape, patches, params.patch_w, params.patch_b)
    if config.use_cls_token:
        cls_row = tape.reshape(params.cls, (1, config.d_model))
        tokens = tape.concat_rows(cls_row, tokens)
    return tape.add(tokens, params.pos)


def _attention(tape: Tape, x: Tensor, bp: BlockParams, config: ViTConfig, attn_sink=None) -> Tensor:
    dh = config.d_model // config.heads
    q = linear(tape, x, bp.q_w, bp.q_b)
    k = linear(tape, x, bp.k_w, bp.k_b)
    v = linear(tape, x, bp.v_w, bp.v_b)
    inv_scale = 1.0 / math.sqrt(dh)
    ctx = []
    for h in range(config.heads):
        j0, j1 = h * dh, (h + 1) * dh
        qh = tape.slice_cols(q, j0, j1)
        kh = tape.slice_cols(k, j0, j1)
        vh = tape.slice_cols(v, j0, j1)
        weights = tape.softmax_lastdim(tape.scale(tape.matmul(qh, tape.transpose(kh)), inv_scale))
        if attn_sink is not None:
            attn_sink.append(weights.data)
        ctx.append(tape.matmul(weights, vh))
    merged = ctx[0] if config.heads == 1 else tape.concat_cols(*ctx)
    return linear(tape, merged, bp.o_w, bp.o_b)


def _block(tape: Tape, x: Tensor, bp: BlockParams, config: ViTConfig, attn_sink=None) -> Tensor:
    h = tape.layer_norm(x, bp.ln1_gamma, bp.ln1_beta, LN_EPS)
    x = tape.add(x, _attention(tape, h, bp, config, attn_sink))
    h = tape.layer_norm(x, bp.ln2_gamma, bp.ln2_beta, LN_EPS)
    h = linear(tape, h, bp.fc_in_w, bp.fc_in_b)
    h = tape.activation(h, "gelu")
    h = linear(tape, h, bp.fc_out_w, bp.fc_out_b)
    return tape.add(x, h)


def encoder_forward(
    tape: Tape, z0: Tensor, params: ViTParams, config: ViTConfig, attn_sink=None
) -> Tensor:
    """Run the block stack and drop the class-token row; returns [P x d_model]."""
    expected = (config.num_tokens, config.d_model)
    if z0.shape != expected:
        raise ShapeError(f"encoder input has shape {z0.shape}, config expects {expected}")
    x = z0
    for bp in params.blocks:
        x = _block(tape, x, bp, config, attn_sink)
    if config.use_cls_token:
        x = tape.slice_rows(x, 1, config.num_tokens)
    return x


@dataclass
class FreezePartition:
    frozen: list[str]
    trainable: list[str]

    @property
    def frozen_count(self) -> int:
        return len(self.frozen)

    @property
    def trainable_count(self) -> int:
        return len(self.trainable)


def save_weights(path, params: ViTParams, meta: dict | None = None) -> None:
    """Write all encoder parameters to a standalone archive."""
    from .checkpoint import save_archive

    save_archive(path, {name: t.data for name, t in params.named()}, meta)


def load_weights(path, params: ViTParams) -> dict:
    """Overwrite all encoder parameters from an archive; returns its metadata.

    The archive must contain exactly the encoder's keys with matching shapes
    and dtypes; a save/load round trip is bit-exact.
    """
    from .checkpoint import assign_tensors, load_archive

    tensors, meta = load_archive(path)
    assign_tensors(tensors, params.named(), context=str(path))
    return meta


def apply_freeze(params: ViTParams, config: ViTConfig) -> FreezePartition:
    """Exclude the embedding stage and the first freeze_n blocks from training.

    The patch projection, position table, and class token freeze regardless of
    freeze_n; blocks freeze_n+1..depth stay trainable.
    """
    frozen, trainable = [], []
    embed_names = {"patch_embed", "pos_embed", "cls_token"}
    for name, tensor in params.named():
        parts = name.split(".")
        if parts[1] in embed_names:
            is_frozen = True
        else:
            is_frozen = int(parts[2]) < config.freeze_n
        tensor.requires_grad = not is_frozen
        (frozen if is_frozen else trainable).append(name)
    return FreezePartition(frozen, trainable)
