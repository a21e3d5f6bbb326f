"""Independent straight-line reference implementations.

Each function here re-derives a result the production code computes by a
different route (plain loops, no shared helpers), so equivalence checks stay
meaningful. Intended for small inputs only.
"""

from __future__ import annotations

import math

import numpy as np

from .dynamic_head import FilterLayout, FilterVector
from .metrics import ScoredInstance, TruthInstance, _pair_iou
from .pipeline import InstancePrediction, mask_iou

__all__ = [
    "linear_scan_neighbors",
    "naive_mlp_forward",
    "naive_decode",
    "naive_unpack",
    "bucketed_voxel_means",
    "prefix_ap_oracle",
    "quadratic_nms",
    "param_count_by_summation",
]


def linear_scan_neighbors(coords: np.ndarray, query: np.ndarray, r: float) -> np.ndarray:
    """O(N) scan for points with Euclidean distance strictly < r."""
    out = []
    for i in range(len(coords)):
        d = 0.0
        for k in range(3):
            d += (coords[i, k] - query[k]) ** 2
        if math.sqrt(d) < r:
            out.append(i)
    return np.asarray(out, dtype=np.intp)


def naive_mlp_forward(x: np.ndarray, layers: list[tuple[np.ndarray, np.ndarray]],
                      relu_between: bool = True) -> np.ndarray:
    """Row-by-row MLP with explicit loops; layers are (weight (in, out), bias)."""
    out_rows = []
    for row in x:
        h = list(row)
        for li, (w, b) in enumerate(layers):
            nxt = []
            for j in range(w.shape[1]):
                acc = b[j]
                for i in range(w.shape[0]):
                    acc += h[i] * w[i, j]
                nxt.append(acc)
            if relu_between and li < len(layers) - 1:
                nxt = [v if v > 0 else 0.0 for v in nxt]
            h = nxt
        out_rows.append(h)
    return np.asarray(out_rows)


def naive_unpack(flat: np.ndarray, dims: list[tuple[int, int]]):
    """Second implementation of the packing arithmetic (cursor based)."""
    cursor = 0
    layers = []
    for in_dim, out_dim in dims:
        w = np.empty((out_dim, in_dim))
        for r in range(out_dim):
            for c in range(in_dim):
                w[r, c] = flat[cursor]
                cursor += 1
        b = np.empty(out_dim)
        for r in range(out_dim):
            b[r] = flat[cursor]
            cursor += 1
        layers.append((w, b))
    if cursor != len(flat):
        raise ValueError(f"consumed {cursor} of {len(flat)} values")
    return layers


def naive_decode(mask_features: np.ndarray, f_pos: np.ndarray, flat: np.ndarray,
                 dims: list[tuple[int, int]], category_mask: np.ndarray):
    """Per-point loop re-implementation of the dynamic decoder.

    Returns (logits, probabilities) with the category gate applied.
    """
    layers = naive_unpack(flat, dims)
    n = len(mask_features)
    logits = np.zeros(n)
    probs = np.zeros(n)
    for i in range(n):
        h = list(mask_features[i]) + list(f_pos[i])
        for li, (w, b) in enumerate(layers):
            nxt = []
            for r in range(w.shape[0]):
                acc = b[r]
                for c in range(w.shape[1]):
                    acc += w[r, c] * h[c]
                nxt.append(acc)
            if li < len(layers) - 1:
                nxt = [v if v > 0 else 0.0 for v in nxt]
            h = nxt
        raw = h[0]
        if category_mask[i]:
            logits[i] = raw
            probs[i] = 1.0 / (1.0 + math.exp(-raw))
    return logits, probs


def bucketed_voxel_means(points: np.ndarray, feats: np.ndarray, g: int):
    """Per-cell feature means by explicit bucketing; mirrors voxelization."""
    lo = points.min(axis=0)
    hi = points.max(axis=0)
    extent = np.maximum(hi - lo, 1e-6)
    buckets: dict[int, list[int]] = {}
    for i, p in enumerate(points):
        cell = []
        for k in range(3):
            c = int(math.floor((p[k] - lo[k]) / extent[k] * g))
            cell.append(min(c, g - 1))
        flat = (cell[0] * g + cell[1]) * g + cell[2]
        buckets.setdefault(flat, []).append(i)
    grid = np.zeros((g**3, feats.shape[1]))
    occupancy = np.zeros(g**3, dtype=bool)
    for flat, idx in buckets.items():
        grid[flat] = feats[idx].mean(axis=0)
        occupancy[flat] = True
    return grid, occupancy


def prefix_ap_oracle(preds: list[ScoredInstance], gts: list[TruthInstance],
                     iou_threshold: float, category: int) -> float | None:
    """Brute-force AP: re-match every prediction prefix from scratch, build
    the PR points, integrate the right-max precision envelope by hand."""
    cls_preds = sorted((p for p in preds if p.category == category), key=lambda p: -p.score)
    cls_gts = [g for g in gts if g.category == category]
    if not cls_gts:
        return None if not cls_preds else 0.0
    if not cls_preds:
        return 0.0

    def match_prefix(k: int) -> int:
        taken = [False] * len(cls_gts)
        tp = 0
        for pred in cls_preds[:k]:
            best, best_j = 0.0, -1
            for j, gt in enumerate(cls_gts):
                if not taken[j]:
                    iou = _pair_iou(pred, gt)
                    if iou > best:
                        best, best_j = iou, j
            if best_j >= 0 and best >= iou_threshold:
                taken[best_j] = True
                tp += 1
        return tp

    points = []
    for k in range(1, len(cls_preds) + 1):
        tp = match_prefix(k)
        points.append((tp / len(cls_gts), tp / k))
    ap = 0.0
    prev_recall = 0.0
    for idx, (recall, _) in enumerate(points):
        if recall > prev_recall:
            best_later = 0.0
            for recall2, precision2 in points[idx:]:
                if precision2 > best_later:
                    best_later = precision2
            ap += (recall - prev_recall) * best_later
            prev_recall = recall
    return ap


def quadratic_nms(preds: list[InstancePrediction], iou_threshold: float) -> list[InstancePrediction]:
    """Reference NMS: explicit suppressed set, full pairwise IoU table."""
    order = sorted(range(len(preds)), key=lambda i: (-preds[i].score, preds[i].source_cluster))
    n = len(preds)
    iou = [[mask_iou(preds[i].mask, preds[j].mask) for j in range(n)] for i in range(n)]
    suppressed = [False] * n
    kept = []
    for pos, i in enumerate(order):
        if suppressed[i]:
            continue
        kept.append(preds[i])
        for j in order[pos + 1:]:
            if iou[i][j] >= iou_threshold:
                suppressed[j] = True
    return kept


def param_count_by_summation(mask_dim: int, hidden: int, layers: int) -> int:
    """Independent total for the standard decoder layout."""
    total = 0
    prev = mask_dim + 3
    for layer in range(layers):
        out = 1 if layer == layers - 1 else hidden
        total += prev * out  # weights
        total += out  # biases
        prev = out
    return total


def make_filter_vector(flat: np.ndarray, dims) -> FilterVector:
    from .autodiff import Tensor

    return FilterVector(flat=Tensor(flat), layout=FilterLayout(tuple(dims)))
