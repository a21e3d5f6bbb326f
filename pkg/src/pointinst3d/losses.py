"""Training objectives: semantic CE, centroid regression, masked BCE, dice.

The four terms sum with unit weights into the total. Clustering sits inside
the total-loss forward as a non-differentiable selector: gradients reach the
backbone through point features, head outputs, and the weight generator, not
through cluster membership.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (
    Tensor,
    add,
    bce_with_logits,
    div,
    log_softmax,
    mul,
    relu,
    sqrt,
    take_rows,
    tensor_mean,
    tensor_sum,
)
from .backbone import BackboneOutputs, ModelConfig, backbone_forward, semantic_labels
from .clustering import Cluster, ClusteringConfig, cluster_homogeneous
from .dynamic_head import (
    DecodedInstance,
    FilterLayout,
    decode_instance,
    generate_filters,
    position_embed,
    voxelize_cluster,
)
from .scenes import PointScene

__all__ = [
    "LossBreakdown",
    "semantic_loss",
    "centroid_loss",
    "assign_targets",
    "mask_loss",
    "dice_loss",
    "total_loss",
    "loss_forward",
    "ForwardState",
]

DICE_EPS = 1e-6


@dataclass(frozen=True)
class LossBreakdown:
    seg: float
    ctr: float
    mask: float
    dice: float

    @property
    def total(self) -> float:
        return self.seg + self.ctr + self.mask + self.dice


def semantic_loss(logits: Tensor, gt_labels: np.ndarray) -> Tensor:
    """Mean cross-entropy over all points."""
    n, c = logits.shape
    labels = np.asarray(gt_labels, dtype=np.int64).reshape(n)
    bad = np.flatnonzero((labels < 0) | (labels >= c))
    if bad.size:
        raise ValueError(f"label {labels[bad[0]]} out of range [0, {c}) at index {int(bad[0])}")
    onehot = np.zeros((n, c))
    onehot[np.arange(n), labels] = 1.0
    picked = mul(log_softmax(logits, axis=1), Tensor(onehot))
    return -tensor_sum(picked) / float(n)


def _abs(t: Tensor) -> Tensor:
    return add(relu(t), relu(-t))


def centroid_loss(coords: np.ndarray, offsets: Tensor, gt_centroids: np.ndarray,
                  valid: np.ndarray, norm: str = "l2") -> Tensor:
    """Mean over valid points of the shifted-point-to-centroid residual norm.

    Zero when no point is valid. norm="l1" is the comparison variant.
    """
    valid = np.asarray(valid, dtype=bool)
    idx = np.flatnonzero(valid)
    if idx.size == 0:
        return Tensor(0.0)
    residual = add(take_rows(offsets, idx), Tensor(coords[idx] - gt_centroids[idx]))
    if norm == "l2":
        per_point = sqrt(tensor_sum(mul(residual, residual), axis=1))
    elif norm == "l1":
        per_point = tensor_sum(_abs(residual), axis=1)
    else:
        raise ValueError(f"unknown norm {norm!r}")
    return tensor_mean(per_point)


def assign_targets(clusters: list[Cluster], gt_instance_ids: np.ndarray) -> list[np.ndarray | None]:
    """Plurality ground-truth instance per cluster; background plurality -> None.

    Ties break toward the smaller instance id (-1 = background included).
    """
    gt = np.asarray(gt_instance_ids, dtype=np.int64)
    out: list[np.ndarray | None] = []
    for cluster in clusters:
        ids, counts = np.unique(gt[cluster.members], return_counts=True)
        winner = int(ids[int(np.argmax(counts))])  # unique() sorts: first max = smallest id
        out.append(None if winner < 0 else gt == winner)
    return out


def _on_category(l_seg: np.ndarray, label: int) -> np.ndarray:
    return np.flatnonzero(np.asarray(l_seg) == label)


def mask_loss(cluster_logits: list[Tensor], targets: list[np.ndarray | None],
              l_seg: np.ndarray, cluster_labels: list[int]) -> Tensor:
    """Per-cluster mean BCE over same-category points, averaged over clusters.

    Ignored clusters (background targets) are excluded from the average;
    clusters with no same-category points contribute zero.
    """
    terms: list[Tensor] = []
    for logits, target, label in zip(cluster_logits, targets, cluster_labels):
        if target is None:
            continue
        idx = _on_category(l_seg, label)
        if idx.size == 0:
            terms.append(Tensor(0.0))
            continue
        bce = bce_with_logits(take_rows(logits, idx), Tensor(target[idx].astype(np.float64)))
        terms.append(tensor_mean(bce))
    return _mean_terms(terms)


def dice_loss(cluster_probs: list[Tensor], targets: list[np.ndarray | None],
              l_seg: np.ndarray, cluster_labels: list[int]) -> Tensor:
    """1 - 2*sum(pq) / (sum(p^2) + sum(q^2) + eps), category-restricted."""
    terms: list[Tensor] = []
    for probs, target, label in zip(cluster_probs, targets, cluster_labels):
        if target is None:
            continue
        idx = _on_category(l_seg, label)
        if idx.size == 0:
            terms.append(Tensor(0.0))
            continue
        p = take_rows(probs, idx)
        q = Tensor(target[idx].astype(np.float64))
        overlap = 2.0 * tensor_sum(mul(p, q))
        denom = tensor_sum(mul(p, p)) + tensor_sum(mul(q, q)) + DICE_EPS
        terms.append(1.0 - div(overlap, denom))
    return _mean_terms(terms)


def _mean_terms(terms: list[Tensor]) -> Tensor:
    if not terms:
        return Tensor(0.0)
    acc = terms[0]
    for t in terms[1:]:
        acc = add(acc, t)
    return acc / float(len(terms))


@dataclass
class ForwardState:
    """Everything the full loss forward computed, for reuse and freezing."""

    outputs: BackboneOutputs
    l_seg: np.ndarray
    clusters: list[Cluster]
    targets: list[np.ndarray | None]
    decoded: list[DecodedInstance]


def loss_forward(
    scene: PointScene,
    params: dict[str, Tensor],
    model_cfg: ModelConfig,
    cluster_cfg: ClusteringConfig,
    warmup: bool = False,
    frozen: ForwardState | None = None,
    centroid_norm: str = "l2",
) -> tuple[LossBreakdown, Tensor, ForwardState]:
    """Full forward pass: backbone -> cluster -> filters -> decode -> losses.

    With ``frozen`` the clustering and predicted labels of an earlier pass are
    reused, which makes the map parameter->loss differentiable (used by
    gradient checks). Returns (breakdown, differentiable total, state).
    """
    outputs = backbone_forward(scene, params, model_cfg)
    seg = semantic_loss(outputs.semantic_logits, scene.gt_semantic)
    valid = scene.gt_instance >= 0
    ctr = centroid_loss(scene.coords, outputs.offsets, scene.gt_centroids, valid, norm=centroid_norm)

    if warmup:
        breakdown = LossBreakdown(seg=seg.item(), ctr=ctr.item(), mask=0.0, dice=0.0)
        state = ForwardState(outputs=outputs, l_seg=semantic_labels(outputs.semantic_logits),
                             clusters=[], targets=[], decoded=[])
        return breakdown, add(seg, ctr), state

    if frozen is None:
        l_seg = semantic_labels(outputs.semantic_logits)
        clusters = cluster_homogeneous(scene.coords, outputs.offsets.values, l_seg, cluster_cfg)
        targets = assign_targets(clusters, scene.gt_instance)
    else:
        l_seg = frozen.l_seg
        clusters = frozen.clusters
        targets = frozen.targets

    layout = FilterLayout.for_decoder(model_cfg.mask_dim, model_cfg.decoder_width, model_cfg.decoder_layers)
    decoded: list[DecodedInstance] = []
    for cluster in clusters:
        grid = voxelize_cluster(cluster, scene.coords, outputs.point_features, model_cfg.grid_size)
        fv = generate_filters(grid, params, layout)
        f_pos = position_embed(scene.coords, cluster.centroid)
        decoded.append(decode_instance(outputs.mask_features, f_pos, fv, l_seg == cluster.label))

    labels = [c.label for c in clusters]
    mask = mask_loss([d.logits for d in decoded], targets, l_seg, labels)
    dice = dice_loss([d.probs for d in decoded], targets, l_seg, labels)
    total = add(add(seg, ctr), add(mask, dice))
    breakdown = LossBreakdown(seg=seg.item(), ctr=ctr.item(), mask=mask.item(), dice=dice.item())
    state = ForwardState(outputs=outputs, l_seg=l_seg, clusters=clusters, targets=targets, decoded=decoded)
    return breakdown, total, state


def total_loss(scene: PointScene, params: dict[str, Tensor], model_cfg: ModelConfig,
               cluster_cfg: ClusteringConfig, warmup: bool = False) -> LossBreakdown:
    breakdown, _, _ = loss_forward(scene, params, model_cfg, cluster_cfg, warmup=warmup)
    return breakdown
