"""Desk-scale point backbone: per-point MLP, pooled-token transformer, heads.

Stands in for a full sparse-conv U-Net. Coordinates are centered per scene
before encoding, so the backbone is translation-invariant; spatial context
enters through a global mean feature and through grid-pooled tokens run
through self-attention with relative-position bias.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import AttentionConfig, init_mhsa_params, mhsa_forward
from .autodiff import (
    ShapeMismatchError,
    Tensor,
    add,
    matmul,
    relu,
    scatter_mean,
    take_rows,
)
from .scenes import PointScene

__all__ = [
    "ModelConfig",
    "BackboneOutputs",
    "init_model_params",
    "encode_points",
    "bottleneck_transformer",
    "heads",
    "backbone_forward",
    "semantic_labels",
]


@dataclass(frozen=True)
class ModelConfig:
    in_features: int = 7  # per-point feature channels I
    num_classes: int = 5  # C, stuff included
    feat_dim: int = 32  # D
    mask_dim: int = 16  # D'
    heads: int = 2
    transformer_layers: int = 2
    token_cell: float = 0.5  # meters
    encoder_hidden: int = 64
    head_hidden: int = 32
    gw_channels: int = 0  # 0 -> feat_dim
    gw_hidden: int = 64
    decoder_layers: int = 3  # L, final 1-channel layer included
    decoder_hidden: int = 0  # 0 -> mask_dim
    grid_size: int = 14  # g
    use_layer_norm: bool = False

    @property
    def gw_width(self) -> int:
        return self.gw_channels or self.feat_dim

    @property
    def decoder_width(self) -> int:
        return self.decoder_hidden or self.mask_dim

    @property
    def attention(self) -> AttentionConfig:
        return AttentionConfig(dim=self.feat_dim, heads=self.heads, use_layer_norm=self.use_layer_norm)


@dataclass
class BackboneOutputs:
    point_features: Tensor  # (N, D) features the heads consumed
    semantic_logits: Tensor  # (N, C)
    offsets: Tensor  # (N, 3) meters
    mask_features: Tensor  # (N, D')


def _linear_params(rng, name, fan_in, fan_out):
    return {
        f"{name}.w": Tensor(rng.normal(0.0, 1.0 / np.sqrt(fan_in), (fan_in, fan_out)), requires_grad=True),
        f"{name}.b": Tensor(np.zeros(fan_out), requires_grad=True),
    }


def _mlp2(x: Tensor, params, name) -> Tensor:
    h = relu(add(matmul(x, params[f"{name}.l1.w"]), params[f"{name}.l1.b"]))
    return add(matmul(h, params[f"{name}.l2.w"]), params[f"{name}.l2.b"])


def init_model_params(cfg: ModelConfig, seed: int) -> dict[str, Tensor]:
    """All backbone + weight-generator parameters, keyed by dotted names."""
    from .dynamic_head import FilterLayout, param_count  # cycle-safe: type-only use

    rng = np.random.default_rng(seed)
    point_in = 2 * (3 + cfg.in_features)
    params: dict[str, Tensor] = {}
    params.update(_linear_params(rng, "enc.l1", point_in, cfg.encoder_hidden))
    params.update(_linear_params(rng, "enc.l2", cfg.encoder_hidden, cfg.feat_dim))
    for layer in range(cfg.transformer_layers):
        params.update(init_mhsa_params(rng, cfg.attention, prefix=f"tf{layer}."))
    for head, out in (("sem", cfg.num_classes), ("off", 3), ("mask", cfg.mask_dim)):
        params.update(_linear_params(rng, f"head.{head}.l1", cfg.feat_dim, cfg.head_hidden))
        params.update(_linear_params(rng, f"head.{head}.l2", cfg.head_hidden, out))
    width = cfg.gw_width
    layout = FilterLayout.for_decoder(cfg.mask_dim, cfg.decoder_width, cfg.decoder_layers)
    params["gw.conv1.w"] = Tensor(rng.normal(0.0, 1.0 / np.sqrt(27 * cfg.feat_dim), (3, 3, 3, cfg.feat_dim, width)), requires_grad=True)
    params["gw.conv1.b"] = Tensor(np.zeros(width), requires_grad=True)
    params["gw.conv2.w"] = Tensor(rng.normal(0.0, 1.0 / np.sqrt(27 * width), (3, 3, 3, width, width)), requires_grad=True)
    params["gw.conv2.b"] = Tensor(np.zeros(width), requires_grad=True)
    params.update(_linear_params(rng, "gw.mlp.l1", width, cfg.gw_hidden))
    params.update(_linear_params(rng, "gw.mlp.l2", cfg.gw_hidden, param_count(layout)))
    return params


def encode_points(scene: PointScene, params: dict[str, Tensor], cfg: ModelConfig) -> Tensor:
    """Per-point MLP over (centered coords, features, global mean). (N, D)."""
    if scene.n_points < 1:
        raise ValueError("scene has no points")
    if scene.feature_dim != cfg.in_features:
        raise ShapeMismatchError("encode_points", f"{scene.feature_dim} features, configured {cfg.in_features}")
    centered = scene.coords - scene.coords.mean(axis=0)
    per_point = np.concatenate([centered, scene.features], axis=1)
    global_mean = np.broadcast_to(per_point.mean(axis=0), per_point.shape)
    x = Tensor(np.concatenate([per_point, global_mean], axis=1))
    return _mlp2(x, params, "enc")


def _token_grid(coords: np.ndarray, token_cell: float):
    centered = coords - coords.mean(axis=0)
    cells = np.floor(centered / token_cell).astype(np.int64)
    uniq, token_ids = np.unique(cells, axis=0, return_inverse=True)
    centers = (uniq + 0.5) * token_cell
    return token_ids, centers


def bottleneck_transformer(feats: Tensor, coords: np.ndarray, params: dict[str, Tensor],
                           cfg: ModelConfig) -> Tensor:
    """Grid-pool to tokens, attend, broadcast back, add residually."""
    if cfg.token_cell <= 0:
        raise ValueError("token_cell must be > 0")
    token_ids, centers = _token_grid(coords, cfg.token_cell)
    t_count = len(centers)
    tokens = scatter_mean(feats, token_ids, t_count)
    rel = Tensor(centers[:, None, :] - centers[None, :, :])
    y = tokens
    for layer in range(cfg.transformer_layers):
        y = mhsa_forward(y, params, rel, cfg.attention, prefix=f"tf{layer}.")
    return add(feats, take_rows(y, token_ids))


def heads(point_features: Tensor, params: dict[str, Tensor], cfg: ModelConfig) -> BackboneOutputs:
    """Three parallel MLP heads: semantic logits, offsets, mask features."""
    if point_features.shape[1] != cfg.feat_dim:
        raise ShapeMismatchError("heads", f"{point_features.shape} vs D={cfg.feat_dim}")
    return BackboneOutputs(
        point_features=point_features,
        semantic_logits=_mlp2(point_features, params, "head.sem"),
        offsets=_mlp2(point_features, params, "head.off"),
        mask_features=_mlp2(point_features, params, "head.mask"),
    )


def backbone_forward(scene: PointScene, params: dict[str, Tensor], cfg: ModelConfig) -> BackboneOutputs:
    feats = encode_points(scene, params, cfg)
    feats = bottleneck_transformer(feats, scene.coords, params, cfg)
    return heads(feats, params, cfg)


def semantic_labels(semantic_logits: Tensor | np.ndarray) -> np.ndarray:
    """argmax labels; ties resolve to the lowest class id."""
    values = semantic_logits.values if isinstance(semantic_logits, Tensor) else semantic_logits
    return values.argmax(axis=1)
