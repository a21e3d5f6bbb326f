"""Grouping of homogeneous points: same predicted label, close centroid votes.

Two points join the same cluster iff they are connected by a chain of
same-label points whose shifted coordinates (p + offset) are pairwise within
strict distance r. The production path is a breadth-first search over a grid
index; the quadratic union-find oracle is kept alongside for verification.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .grid import build_grid_index, radius_neighbors

__all__ = [
    "Cluster",
    "ClusteringConfig",
    "cluster_homogeneous",
    "cluster_bruteforce_oracle",
    "canonical_partition",
    "cluster_purity",
]


@dataclass(frozen=True)
class Cluster:
    members: np.ndarray  # sorted point indices
    centroid: np.ndarray  # (3,) mean of members' original coordinates
    label: int

    @property
    def size(self) -> int:
        return len(self.members)


@dataclass(frozen=True)
class ClusteringConfig:
    radius: float
    stuff_labels: frozenset[int] = frozenset()
    min_report_size: int = 50
    use_shifted_centroid: bool = False  # comparison flag; default follows Alg. 1

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError(f"radius must be > 0, got {self.radius}")
        object.__setattr__(self, "stuff_labels", frozenset(self.stuff_labels))


def _validate(coords, offsets, labels) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 3)
    offsets = np.asarray(offsets, dtype=np.float64).reshape(-1, 3)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if not (len(coords) == len(offsets) == len(labels)):
        raise ValueError(f"length mismatch: {len(coords)} coords, {len(offsets)} offsets, {len(labels)} labels")
    bad = np.flatnonzero(labels < 0)
    if bad.size:
        raise ValueError(f"out-of-range label {labels[bad[0]]} at index {int(bad[0])}")
    return coords, offsets, labels


def _finish(members: list[int], coords, shifted, labels, cfg: ClusteringConfig) -> Cluster:
    idx = np.asarray(sorted(members), dtype=np.intp)
    source = shifted if cfg.use_shifted_centroid else coords
    return Cluster(members=idx, centroid=source[idx].mean(axis=0), label=int(labels[idx[0]]))


def cluster_homogeneous(coords, offsets, labels, cfg: ClusteringConfig) -> list[Cluster]:
    """BFS grouping of non-stuff points; deterministic ascending-seed order."""
    coords, offsets, labels = _validate(coords, offsets, labels)
    n = len(coords)
    if n == 0:
        return []
    shifted = coords + offsets
    index = build_grid_index(shifted, cfg.radius)
    visited = np.isin(labels, list(cfg.stuff_labels))
    clusters: list[Cluster] = []
    for seed in range(n):
        if visited[seed]:
            continue
        visited[seed] = True
        members = [seed]
        queue = deque([seed])
        while queue:
            k = queue.popleft()
            for j in radius_neighbors(index, shifted[k], cfg.radius):
                if visited[j] or labels[j] != labels[k]:
                    continue
                visited[j] = True
                members.append(int(j))
                queue.append(int(j))
        clusters.append(_finish(members, coords, shifted, labels, cfg))
    return clusters


class _UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, a: int) -> int:
        root = a
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[a] != root:
            self.parent[a], a = root, self.parent[a]
        return root

    def union(self, a: int, b: int) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[max(ra, rb)] = min(ra, rb)


def cluster_bruteforce_oracle(coords, offsets, labels, cfg: ClusteringConfig) -> list[Cluster]:
    """Union-find over all O(N^2) same-label pairs with shifted distance < r.

    Canonical output: clusters sorted by smallest member, members sorted.
    Intended for N up to a couple of thousand.
    """
    coords, offsets, labels = _validate(coords, offsets, labels)
    n = len(coords)
    shifted = coords + offsets
    keep = ~np.isin(labels, list(cfg.stuff_labels))
    uf = _UnionFind(n)
    active = np.flatnonzero(keep)
    for label in np.unique(labels[active]):
        group = active[labels[active] == label]
        if len(group) < 2:
            continue
        pts = shifted[group]
        d2 = ((pts[:, None, :] - pts[None, :, :]) ** 2).sum(axis=2)
        ii, jj = np.nonzero(d2 < cfg.radius**2)
        for a, b in zip(ii, jj):
            if a < b:
                uf.union(int(group[a]), int(group[b]))
    groups: dict[int, list[int]] = {}
    for i in active:
        groups.setdefault(uf.find(int(i)), []).append(int(i))
    clusters = [
        _finish(members, coords, shifted, labels, cfg)
        for _, members in sorted(groups.items(), key=lambda kv: min(kv[1]))
    ]
    return clusters


def canonical_partition(clusters: list[Cluster]) -> tuple[tuple[int, ...], ...]:
    """Order-free representation for partition equality checks."""
    return tuple(sorted(tuple(int(i) for i in c.members) for c in clusters))


def cluster_purity(clusters: list[Cluster], gt_instance: np.ndarray) -> float:
    """Mean over clusters of the plurality ground-truth instance fraction."""
    if not clusters:
        return 0.0
    gt_instance = np.asarray(gt_instance, dtype=np.int64)
    total = 0.0
    for c in clusters:
        ids, counts = np.unique(gt_instance[c.members], return_counts=True)
        total += counts.max() / c.size
    return total / len(clusters)
