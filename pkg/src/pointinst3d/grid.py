"""Uniform-grid spatial hash for radius queries over 3-d points."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["GridIndex", "build_grid_index", "radius_neighbors"]


@dataclass(frozen=True)
class GridIndex:
    cell_size: float
    cells: dict[tuple[int, int, int], np.ndarray]
    coords: np.ndarray  # (N, 3) snapshot the index was built over


def build_grid_index(coords: np.ndarray, cell_size: float) -> GridIndex:
    """Bucket every point by floor(coords / cell_size). O(N) expected."""
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 3)
    if cell_size <= 0:
        raise ValueError(f"cell_size must be > 0, got {cell_size}")
    bad = np.flatnonzero(~np.isfinite(coords).all(axis=1))
    if bad.size:
        raise ValueError(f"non-finite coordinate at point index {int(bad[0])}")
    cells: dict[tuple[int, int, int], list[int]] = {}
    keys = np.floor(coords / cell_size).astype(np.int64)
    for i, key in enumerate(map(tuple, keys)):
        cells.setdefault(key, []).append(i)
    frozen = {k: np.asarray(v, dtype=np.intp) for k, v in cells.items()}
    return GridIndex(cell_size=float(cell_size), cells=frozen, coords=coords.copy())


def radius_neighbors(index: GridIndex, query: np.ndarray, r: float) -> np.ndarray:
    """Indices of points with Euclidean distance strictly < r from query.

    Scans ceil(r / cell_size) rings of cells; result is sorted for
    reproducibility but callers must not rely on order.
    """
    if r <= 0:
        raise ValueError(f"radius must be > 0, got {r}")
    query = np.asarray(query, dtype=np.float64).reshape(3)
    rings = int(np.ceil(r / index.cell_size))
    base = np.floor(query / index.cell_size).astype(np.int64)
    candidates: list[np.ndarray] = []
    for dx in range(-rings, rings + 1):
        for dy in range(-rings, rings + 1):
            for dz in range(-rings, rings + 1):
                bucket = index.cells.get((base[0] + dx, base[1] + dy, base[2] + dz))
                if bucket is not None:
                    candidates.append(bucket)
    if not candidates:
        return np.empty(0, dtype=np.intp)
    cand = np.concatenate(candidates)
    d2 = ((index.coords[cand] - query) ** 2).sum(axis=1)
    hits = cand[d2 < r * r]
    hits.sort()
    return hits
