"""Shared tiny configurations and independent numpy oracles for the suite."""

import numpy as np

from vitgru.head import HeadConfig
from vitgru.model import ModelConfig
from vitgru.vit import ViTConfig


def tiny_vit_config(**overrides) -> ViTConfig:
    base = dict(
        image_size=32, patch_size=8, channels=3, d_model=32,
        depth=2, heads=2, mlp_width=64, freeze_n=1, use_cls_token=True,
    )
    base.update(overrides)
    return ViTConfig(**base)


def tiny_head_config(**overrides) -> HeadConfig:
    base = dict(d_vit=32, d_gru=16, num_classes=3)
    base.update(overrides)
    return HeadConfig(**base)


def tiny_model_config(dtype="float64", **vit_overrides) -> ModelConfig:
    vit = tiny_vit_config(**vit_overrides)
    return ModelConfig(vit=vit, head=tiny_head_config(d_vit=vit.d_model), dtype=dtype)


def gru_step_oracle(x, h, p):
    """Gate equations evaluated directly in numpy; p maps gate names to arrays."""
    def sig(v):
        return 1.0 / (1.0 + np.exp(-v))

    r = sig(p["w_reset"] @ x + p["u_reset"] @ h + p["b_reset"])
    u = sig(p["w_update"] @ x + p["u_update"] @ h + p["b_update"])
    c = np.tanh(p["w_cand"] @ x + r * (p["u_cand"] @ h + p["b_cand"]))
    return (1.0 - u) * c + u * h


def direction_params_as_dict(dp):
    return {name.split(".")[-1]: t.data for name, t in dp.named("d")}


def affine_oracle(x, w, b):
    """Row-wise x @ w.T + b via explicit loops."""
    n, _ = x.shape
    out_dim = w.shape[0]
    out = np.zeros((n, out_dim), dtype=np.float64)
    for i in range(n):
        for o in range(out_dim):
            out[i, o] = float(np.dot(w[o], x[i])) + b[o]
    return out


def median_filter_oracle(img, k):
    """Brute-force per-channel median with edge replication."""
    h, w, c = img.shape
    pad = k // 2
    out = np.zeros_like(img)
    for ch in range(c):
        for i in range(h):
            for j in range(w):
                vals = []
                for di in range(-pad, pad + 1):
                    for dj in range(-pad, pad + 1):
                        ii = min(max(i + di, 0), h - 1)
                        jj = min(max(j + dj, 0), w - 1)
                        vals.append(img[ii, jj, ch])
                out[i, j, ch] = np.median(vals)
    return out
