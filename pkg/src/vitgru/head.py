"""Classification head: bridge projection, bidirectional GRU, pooling, logits.

The encoder's patch features are projected down to the recurrent width, read
once forward and once backward by a single-layer GRU per direction, pooled by
a plain mean over positions, and mapped to class logits. No softmax here; the
loss and the reporting layer decide what to do with raw logits.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor import Tape, Tensor, linear


@dataclass(frozen=True)
class HeadConfig:
    d_vit: int = 768
    d_gru: int = 512
    num_classes: int = 3

    def __post_init__(self):
        for name in ("d_vit", "d_gru", "num_classes"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")

    @property
    def bigru_width(self) -> int:
        return 2 * self.d_gru


@dataclass
class GruDirectionParams:
    w_reset: Tensor
    u_reset: Tensor
    b_reset: Tensor
    w_update: Tensor
    u_update: Tensor
    b_update: Tensor
    w_cand: Tensor
    u_cand: Tensor
    b_cand: Tensor

    _FIELDS = (
        "w_reset", "u_reset", "b_reset",
        "w_update", "u_update", "b_update",
        "w_cand", "u_cand", "b_cand",
    )

    def named(self, prefix: str):
        for attr in self._FIELDS:
            yield f"{prefix}.{attr}", getattr(self, attr)

    def tensors(self) -> list[Tensor]:
        return [getattr(self, attr) for attr in self._FIELDS]


@dataclass
class HeadParams:
    bridge_w: Tensor
    bridge_b: Tensor
    fwd: GruDirectionParams
    bwd: GruDirectionParams
    cls_w: Tensor
    cls_b: Tensor

    def named(self, prefix: str = "head"):
        yield f"{prefix}.bridge.weight", self.bridge_w
        yield f"{prefix}.bridge.bias", self.bridge_b
        yield from self.fwd.named(f"{prefix}.gru_fwd")
        yield from self.bwd.named(f"{prefix}.gru_bwd")
        yield f"{prefix}.classifier.weight", self.cls_w
        yield f"{prefix}.classifier.bias", self.cls_b


def _init_direction(config: HeadConfig, rng: np.random.Generator, dtype) -> GruDirectionParams:
    d = config.d_gru
    bound = 1.0 / math.sqrt(d)

    def weight():
        return Tensor(rng.uniform(-bound, bound, size=(d, d)).astype(dtype))

    def bias():
        return Tensor(np.zeros(d, dtype=dtype))

    return GruDirectionParams(
        w_reset=weight(), u_reset=weight(), b_reset=bias(),
        w_update=weight(), u_update=weight(), b_update=bias(),
        w_cand=weight(), u_cand=weight(), b_cand=bias(),
    )


def init_head_params(config: HeadConfig, rng: np.random.Generator, dtype=np.float32) -> HeadParams:
    """Fresh parameters: uniform fan-in bridge/classifier, +-1/sqrt(d_gru) gates."""
    def affine(out_dim, in_dim):
        bound = 1.0 / math.sqrt(in_dim)
        w = Tensor(rng.uniform(-bound, bound, size=(out_dim, in_dim)).astype(dtype))
        b = Tensor(np.zeros(out_dim, dtype=dtype))
        return w, b

    bridge_w, bridge_b = affine(config.d_gru, config.d_vit)
    fwd = _init_direction(config, rng, dtype)
    bwd = _init_direction(config, rng, dtype)
    cls_w, cls_b = affine(config.num_classes, config.bigru_width)
    params = HeadParams(bridge_w, bridge_b, fwd, bwd, cls_w, cls_b)
    for name, tensor in params.named():
        tensor.name = name
        tensor.requires_grad = True
    return params


def bridge_project(tape: Tape, z_vit: Tensor, params: HeadParams) -> Tensor:
    """Per-row affine map from encoder width to recurrent width, [P x d_vit] -> [P x d_gru]."""
    if z_vit.ndim != 2 or z_vit.shape[1] != params.bridge_w.shape[1]:
        raise ShapeError(
            f"bridge input has shape {z_vit.shape}, projection expects width {params.bridge_w.shape[1]}"
        )
    return linear(tape, z_vit, params.bridge_w, params.bridge_b)


def _gru_step_row(tape: Tape, pre_r: Tensor, pre_u: Tensor, pre_c: Tensor,
                  h: Tensor, tu_r: Tensor, tu_u: Tensor, tu_c: Tensor,
                  b_cand: Tensor) -> Tensor:
    # pre_r / pre_u already include the input projection and gate bias;
    # pre_c holds only the input projection (its bias sits inside the reset gating)
    r = tape.sigmoid(tape.add(pre_r, tape.matmul(h, tu_r)))
    u = tape.sigmoid(tape.add(pre_u, tape.matmul(h, tu_u)))
    rec = tape.add_bias(tape.matmul(h, tu_c), b_cand)
    c = tape.tanh(tape.add(pre_c, tape.mul(r, rec)))
    # (1 - u) * c + u * h, written as c + u * (h - c)
    return tape.add(c, tape.mul(u, tape.sub(h, c)))


def gru_step(tape: Tape, x: Tensor, h_prev: Tensor, params: GruDirectionParams) -> Tensor:
    """One gated recurrent update on 1-D state vectors.

    r = sigmoid(W_r x + U_r h + b_r); u = sigmoid(W_u x + U_u h + b_u);
    c = tanh(W_c x + r * (U_c h + b_c)); h' = (1 - u) * c + u * h.
    """
    d = params.w_reset.shape[0]
    if x.shape != (d,) or h_prev.shape != (d,):
        raise ShapeError(f"gru_step expects vectors of width {d}, got {x.shape} and {h_prev.shape}")
    xr = tape.reshape(x, (1, d))
    hr = tape.reshape(h_prev, (1, d))
    pre_r = tape.add_bias(tape.matmul(xr, tape.transpose(params.w_reset)), params.b_reset)
    pre_u = tape.add_bias(tape.matmul(xr, tape.transpose(params.w_update)), params.b_update)
    pre_c = tape.matmul(xr, tape.transpose(params.w_cand))
    out = _gru_step_row(
        tape, pre_r, pre_u, pre_c, hr,
        tape.transpose(params.u_reset), tape.transpose(params.u_update),
        tape.transpose(params.u_cand), params.b_cand,
    )
    return tape.reshape(out, (d,))


def _run_direction(tape: Tape, z: Tensor, dp: GruDirectionParams, reverse: bool) -> list[Tensor]:
    """Hidden states in consumption order, starting from a zero state.

    Projections run row by row with the exact operation shapes gru_step uses,
    so a loop of gru_step calls over the same rows reproduces these states
    bit for bit.
    """
    d = dp.w_reset.shape[0]
    n = z.shape[0]
    rows = tape.split_rows(z)
    tw_r = tape.transpose(dp.w_reset)
    tw_u = tape.transpose(dp.w_update)
    tw_c = tape.transpose(dp.w_cand)
    tu_r = tape.transpose(dp.u_reset)
    tu_u = tape.transpose(dp.u_update)
    tu_c = tape.transpose(dp.u_cand)
    h = Tensor(np.zeros((1, d), dtype=z.dtype))
    states = []
    order = range(n - 1, -1, -1) if reverse else range(n)
    for i in order:
        x = rows[i]
        pre_r = tape.add_bias(tape.matmul(x, tw_r), dp.b_reset)
        pre_u = tape.add_bias(tape.matmul(x, tw_u), dp.b_update)
        pre_c = tape.matmul(x, tw_c)
        h = _gru_step_row(tape, pre_r, pre_u, pre_c, h, tu_r, tu_u, tu_c, dp.b_cand)
        states.append(h)
    return states


def bigru_forward(tape: Tape, z_bridge: Tensor, params: HeadParams) -> Tensor:
    """Concatenate forward and backward hidden states per position, [P x d] -> [P x 2d].

    Row i holds the forward state after consuming rows 1..i and the backward
    state after consuming rows P..i; both directions start from zeros.
    """
    d = params.fwd.w_reset.shape[0]
    if z_bridge.ndim != 2 or z_bridge.shape[0] == 0 or z_bridge.shape[1] != d:
        raise ShapeError(f"bigru input must be [P x {d}] with P >= 1, got {z_bridge.shape}")
    n = z_bridge.shape[0]
    fwd_states = _run_direction(tape, z_bridge, params.fwd, reverse=False)
    bwd_states = _run_direction(tape, z_bridge, params.bwd, reverse=True)
    h_fwd = tape.stack_rows(fwd_states)
    h_bwd = tape.stack_rows([bwd_states[n - 1 - i] for i in range(n)])
    return tape.concat_cols(h_fwd, h_bwd)


def mean_pool(tape: Tape, h: Tensor) -> Tensor:
    """Mean over sequence positions, [P x w] -> [w]."""
    return tape.mean_rows(h)


def classify(tape: Tape, h_pool: Tensor, params: HeadParams) -> Tensor:
    """Raw class logits from the pooled feature vector."""
    width = params.cls_w.shape[1]
    if h_pool.shape != (width,):
        raise ShapeError(f"classifier expects a vector of width {width}, got {h_pool.shape}")
    row = tape.reshape(h_pool, (1, width))
    logits = linear(tape, row, params.cls_w, params.cls_b)
    return tape.reshape(logits, (params.cls_w.shape[0],))
