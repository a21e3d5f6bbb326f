"""Multi-head self-attention with a learned relative-position bias.

One block = scaled dot-product attention over T tokens (the bias, a per-head
linear map of the 3-vector token-coordinate difference, is added to the
logits before softmax) followed by a two-layer feed-forward sublayer, each
with a residual connection. Blocks are built from engine primitives so the
whole thing is differentiable and gradient-checkable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (
    ShapeMismatchError,
    Tensor,
    add,
    concat,
    layer_norm,
    matmul,
    relu,
    reshape,
    slice_axis,
    softmax,
    transpose,
)

__all__ = ["AttentionConfig", "init_mhsa_params", "mhsa_forward", "attention_weights"]


@dataclass(frozen=True)
class AttentionConfig:
    dim: int
    heads: int = 2
    ffn_hidden: int = 0  # 0 means 2*dim
    rel_dim: int = 3
    use_layer_norm: bool = False

    def __post_init__(self):
        if self.dim % self.heads != 0:
            raise ShapeMismatchError("mhsa", f"dim {self.dim} not divisible by {self.heads} heads")

    @property
    def ffn(self) -> int:
        return self.ffn_hidden or 2 * self.dim


def init_mhsa_params(rng: np.random.Generator, cfg: AttentionConfig, prefix: str) -> dict[str, Tensor]:
    """Fresh parameters for one attention block, keyed ``prefix + name``."""
    d, f = cfg.dim, cfg.ffn

    def w(shape, fan_in):
        return Tensor(rng.normal(0.0, 1.0 / np.sqrt(fan_in), shape), requires_grad=True)

    def b(n):
        return Tensor(np.zeros(n), requires_grad=True)

    params = {
        "wq": w((d, d), d), "bq": b(d),
        "wk": w((d, d), d), "bk": b(d),
        "wv": w((d, d), d), "bv": b(d),
        "wo": w((d, d), d), "bo": b(d),
        "relw": w((cfg.heads, cfg.rel_dim), cfg.rel_dim),
        "ffn_w1": w((d, f), d), "ffn_b1": b(f),
        "ffn_w2": w((f, d), f), "ffn_b2": b(d),
    }
    if cfg.use_layer_norm:
        params["ln1_g"] = Tensor(np.ones(d), requires_grad=True)
        params["ln1_b"] = b(d)
        params["ln2_g"] = Tensor(np.ones(d), requires_grad=True)
        params["ln2_b"] = b(d)
    return {prefix + k: v for k, v in params.items()}


def _attention(tokens: Tensor, params, prefix: str, cfg: AttentionConfig, rel_pos: Tensor,
               collect: list[np.ndarray] | None) -> Tensor:
    t_count, d = tokens.shape
    head_dim = d // cfg.heads
    scale = 1.0 / np.sqrt(head_dim)

    q = add(matmul(tokens, params[prefix + "wq"]), params[prefix + "bq"])
    k = add(matmul(tokens, params[prefix + "wk"]), params[prefix + "bk"])
    v = add(matmul(tokens, params[prefix + "wv"]), params[prefix + "bv"])
    rel_flat = reshape(rel_pos, (t_count * t_count, cfg.rel_dim))

    head_outs = []
    for h in range(cfg.heads):
        lo, hi = h * head_dim, (h + 1) * head_dim
        qh = slice_axis(q, 1, lo, hi)
        kh = slice_axis(k, 1, lo, hi)
        vh = slice_axis(v, 1, lo, hi)
        logits = mul_scale(matmul(qh, transpose(kh)), scale)
        relw_h = transpose(slice_axis(params[prefix + "relw"], 0, h, h + 1))  # (rel_dim, 1)
        bias = reshape(matmul(rel_flat, relw_h), (t_count, t_count))
        weights = softmax(add(logits, bias), axis=-1)
        if collect is not None:
            collect.append(weights.values.copy())
        head_outs.append(matmul(weights, vh))
    attended = concat(head_outs, axis=1) if cfg.heads > 1 else head_outs[0]
    return add(matmul(attended, params[prefix + "wo"]), params[prefix + "bo"])


def mul_scale(t: Tensor, s: float) -> Tensor:
    return t * Tensor(np.float64(s))


def mhsa_forward(tokens: Tensor, params: dict[str, Tensor], rel_pos: Tensor,
                 cfg: AttentionConfig, prefix: str = "",
                 collect_weights: list[np.ndarray] | None = None) -> Tensor:
    """One attention + feed-forward block with residual connections.

    tokens: (T, D); rel_pos: (T, T, rel_dim) coordinate differences per token
    pair (all-zero is fine). Returns (T, D).
    """
    t_count, d = tokens.shape
    if d != cfg.dim:
        raise ShapeMismatchError("mhsa", f"tokens dim {d} != configured {cfg.dim}")
    if rel_pos.shape != (t_count, t_count, cfg.rel_dim):
        raise ShapeMismatchError("mhsa", f"rel_pos {rel_pos.shape} for T={t_count}")

    x = add(tokens, _attention(tokens, params, prefix, cfg, rel_pos, collect_weights))
    if cfg.use_layer_norm:
        x = layer_norm(x, params[prefix + "ln1_g"], params[prefix + "ln1_b"])
    h = relu(add(matmul(x, params[prefix + "ffn_w1"]), params[prefix + "ffn_b1"]))
    y = add(x, add(matmul(h, params[prefix + "ffn_w2"]), params[prefix + "ffn_b2"]))
    if cfg.use_layer_norm:
        y = layer_norm(y, params[prefix + "ln2_g"], params[prefix + "ln2_b"])
    return y


def attention_weights(tokens: Tensor, params: dict[str, Tensor], rel_pos: Tensor,
                      cfg: AttentionConfig, prefix: str = "") -> list[np.ndarray]:
    """Per-head attention matrices for one block (row-stochastic by design)."""
    out: list[np.ndarray] = []
    mhsa_forward(tokens, params, rel_pos, cfg, prefix, collect_weights=out)
    return out
