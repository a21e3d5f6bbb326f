"""End-to-end inference: heads -> clustering -> decode -> score -> NMS.

Predictions are binary point masks with a category and a confidence score
(the mean semantic probability of the category over the mask's points). The
minimum-size filter applies to cluster size before NMS; NMS is class-agnostic
greedy suppression at mask IoU >= threshold.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import Tensor, softmax
from .backbone import ModelConfig, backbone_forward, semantic_labels
from .clustering import Cluster, ClusteringConfig, cluster_homogeneous
from .dynamic_head import FilterLayout, decode_instance, generate_filters, position_embed, voxelize_cluster
from .scenes import PointScene, oracle_predictions

__all__ = [
    "InstancePrediction",
    "mask_iou",
    "score_instance",
    "nms",
    "run_inference",
    "run_oracle_inference",
    "save_predictions",
    "load_predictions",
    "PredictionFileError",
]


@dataclass
class InstancePrediction:
    mask: np.ndarray  # (N,) booleans
    category: int
    score: float
    source_cluster: int

    def key(self) -> tuple:
        """Order-free identity for set comparisons."""
        return (self.category, tuple(np.flatnonzero(self.mask).tolist()), round(self.score, 12))


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union of two boolean masks; 0 when both empty."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask length mismatch: {a.shape} vs {b.shape}")
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 0.0
    return float(np.logical_and(a, b).sum() / union)


def score_instance(mask: np.ndarray, semantic_probs: np.ndarray, category: int) -> float:
    """Mean probability of the category over the mask's points."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("cannot score an empty mask")
    return float(semantic_probs[mask, category].mean())


def nms(preds: list[InstancePrediction], iou_threshold: float) -> list[InstancePrediction]:
    """Greedy suppression: keep score order, drop anything overlapping a kept
    prediction at IoU >= threshold. Class-agnostic; ties break toward the
    smaller source cluster index."""
    if not (0.0 < iou_threshold <= 1.0):
        raise ValueError(f"iou_threshold must be in (0, 1], got {iou_threshold}")
    order = sorted(preds, key=lambda p: (-p.score, p.source_cluster))
    kept: list[InstancePrediction] = []
    for cand in order:
        if all(mask_iou(cand.mask, k.mask) < iou_threshold for k in kept):
            kept.append(cand)
    return kept


def _predictions_from_clusters(
    clusters: list[Cluster],
    decode_mask_fn,
    semantic_probs: np.ndarray,
    min_cluster_size: int,
    nms_iou: float,
) -> list[InstancePrediction]:
    """Shared tail of inference. decode_mask_fn(cluster) -> boolean mask."""
    # Canonical order (by smallest member) keeps the result independent of
    # how the cluster list was enumerated.
    indexed = sorted(enumerate(clusters), key=lambda kv: int(kv[1].members[0]))
    preds: list[InstancePrediction] = []
    for rank, (_, cluster) in enumerate(indexed):
        if cluster.size < min_cluster_size:
            continue
        mask = decode_mask_fn(cluster)
        if not mask.any():
            continue
        preds.append(InstancePrediction(
            mask=mask,
            category=cluster.label,
            score=score_instance(mask, semantic_probs, cluster.label),
            source_cluster=rank,
        ))
    return nms(preds, nms_iou)


def run_inference(
    scene: PointScene,
    params: dict[str, Tensor],
    model_cfg: ModelConfig,
    cluster_cfg: ClusteringConfig,
    nms_iou: float = 0.3,
    seed_points: int | None = None,
    seed: int = 0,
) -> list[InstancePrediction]:
    """Deterministic full-model inference on one scene.

    ``seed_points`` switches to the point-seeded ablation: K sampled non-stuff
    points act as singleton filter seeds and clustering is skipped.
    """
    outputs = backbone_forward(scene, params, model_cfg)
    l_seg = semantic_labels(outputs.semantic_logits)
    semantic_probs = softmax(outputs.semantic_logits, axis=1).values
    min_size = cluster_cfg.min_report_size

    if seed_points is None:
        clusters = cluster_homogeneous(scene.coords, outputs.offsets.values, l_seg, cluster_cfg)
    else:
        clusters = _point_seed_clusters(scene, outputs.offsets.values, l_seg, cluster_cfg, seed_points, seed)
        min_size = 1  # singleton seeds would never survive the size filter

    layout = FilterLayout.for_decoder(model_cfg.mask_dim, model_cfg.decoder_width, model_cfg.decoder_layers)

    def decode_mask(cluster: Cluster) -> np.ndarray:
        grid = voxelize_cluster(cluster, scene.coords, outputs.point_features, model_cfg.grid_size)
        fv = generate_filters(grid, params, layout)
        f_pos = position_embed(scene.coords, cluster.centroid)
        return decode_instance(outputs.mask_features, f_pos, fv, l_seg == cluster.label).binary_mask

    return _predictions_from_clusters(clusters, decode_mask, semantic_probs, min_size, nms_iou)


def _point_seed_clusters(scene, offsets, l_seg, cluster_cfg, k, seed) -> list[Cluster]:
    foreground = np.flatnonzero(~np.isin(l_seg, list(cluster_cfg.stuff_labels)))
    if foreground.size == 0:
        return []
    rng = np.random.default_rng(seed)
    picks = rng.choice(foreground, size=min(k, foreground.size), replace=False)
    picks.sort()
    return [
        Cluster(members=np.asarray([int(i)], dtype=np.intp),
                centroid=scene.coords[i] + offsets[i],
                label=int(l_seg[i]))
        for i in picks
    ]


def run_oracle_inference(
    scene: PointScene,
    cluster_cfg: ClusteringConfig,
    nms_iou: float = 0.3,
    offset_sigma: float | None = None,
    label_noise: float | None = None,
    noise_seed: int = 0,
) -> list[InstancePrediction]:
    """Verification path: ground-truth-derived heads, membership decoder.

    The decoded mask of a cluster is its own membership set, so this isolates
    the clustering + scoring + NMS stages from the learned model.
    """
    logits, offsets = oracle_predictions(scene, offset_sigma, label_noise, seed=noise_seed)
    l_seg = semantic_labels(logits)
    semantic_probs = softmax(Tensor(logits), axis=1).values
    clusters = cluster_homogeneous(scene.coords, offsets, l_seg, cluster_cfg)

    def decode_mask(cluster: Cluster) -> np.ndarray:
        mask = np.zeros(scene.n_points, dtype=bool)
        mask[cluster.members] = True
        return mask

    return _predictions_from_clusters(clusters, decode_mask, semantic_probs,
                                      cluster_cfg.min_report_size, nms_iou)


# ---------------------------------------------------------------------------
# prediction files: one text record per instance, RLE mask


class PredictionFileError(Exception):
    pass


def _mask_to_rle(mask: np.ndarray) -> str:
    idx = np.flatnonzero(mask)
    if idx.size == 0:
        return "-"
    breaks = np.flatnonzero(np.diff(idx) > 1)
    starts = np.concatenate([[0], breaks + 1])
    ends = np.concatenate([breaks, [idx.size - 1]])
    return ",".join(f"{idx[s]}:{idx[e] - idx[s] + 1}" for s, e in zip(starts, ends))


def _rle_to_mask(rle: str, n: int) -> np.ndarray:
    mask = np.zeros(n, dtype=bool)
    if rle == "-":
        return mask
    for run in rle.split(","):
        start_s, len_s = run.split(":")
        start, length = int(start_s), int(len_s)
        if start < 0 or start + length > n:
            raise PredictionFileError(f"run {run} outside mask of length {n}")
        mask[start : start + length] = True
    return mask


def save_predictions(path: str | Path, per_scene: dict[int, list[InstancePrediction]]) -> None:
    """Line format: scene=I category=C score=R n=N rle=s:l,s:l,..."""
    lines = []
    for scene_id in sorted(per_scene):
        for pred in per_scene[scene_id]:
            lines.append(
                f"scene={scene_id} category={pred.category} score={pred.score!r} "
                f"n={len(pred.mask)} rle={_mask_to_rle(pred.mask)}"
            )
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def load_predictions(path: str | Path) -> dict[int, list[InstancePrediction]]:
    per_scene: dict[int, list[InstancePrediction]] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            fields = dict(part.split("=", 1) for part in line.split())
            scene_id = int(fields["scene"])
            pred = InstancePrediction(
                mask=_rle_to_mask(fields["rle"], int(fields["n"])),
                category=int(fields["category"]),
                score=float(fields["score"]),
                source_cluster=len(per_scene.get(scene_id, [])),
            )
        except (KeyError, ValueError) as exc:
            raise PredictionFileError(f"{path}:{lineno}: {exc}") from exc
        per_scene.setdefault(scene_id, []).append(pred)
    return per_scene
