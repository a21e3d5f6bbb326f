"""From clusters to masks: voxelize, generate filters, decode.

Each cluster is voxelized onto a fixed g*g*g grid over its own bounding box;
a small sub-network (two masked 3x3x3 convs, occupied-mean pooling, an MLP)
emits one flat parameter vector per cluster. That vector is unpacked into a
stack of 1x1 conv layers which scores every point of the scene from its mask
features concatenated with the position relative to the cluster centroid,
restricted to points sharing the cluster's predicted category.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (
    ShapeMismatchError,
    Tensor,
    add,
    concat,
    matmul,
    mul,
    relu,
    reshape,
    scatter_mean,
    sigmoid,
    slice_axis,
    take_rows,
    tensor_mean,
    transpose,
)
from .clustering import Cluster

__all__ = [
    "FilterLayout",
    "FilterVector",
    "ClusterVoxelGrid",
    "param_count",
    "voxelize_cluster",
    "generate_filters",
    "unpack_filters",
    "position_embed",
    "decode_instance",
    "DecodedInstance",
]


@dataclass(frozen=True)
class FilterLayout:
    """Per-layer (in, out) dims of the dynamic decoder, ending in out=1."""

    dims: tuple[tuple[int, int], ...]

    def __post_init__(self):
        if not self.dims:
            raise ValueError("layout needs at least one layer")
        if self.dims[-1][1] != 1:
            raise ValueError(f"final layer must output 1 channel, got {self.dims[-1][1]}")
        for (_, out_prev), (in_next, _) in zip(self.dims, self.dims[1:]):
            if out_prev != in_next:
                raise ValueError(f"inconsistent chain: {out_prev} -> {in_next}")

    @classmethod
    def for_decoder(cls, mask_dim: int, hidden: int, layers: int) -> "FilterLayout":
        """Standard layout: (D'+3) -> hidden x (layers-2) -> hidden -> 1."""
        if layers < 1:
            raise ValueError("layers must be >= 1")
        in_dim = mask_dim + 3
        if layers == 1:
            return cls(((in_dim, 1),))
        dims = [(in_dim, hidden)]
        dims += [(hidden, hidden)] * (layers - 2)
        dims.append((hidden, 1))
        return cls(tuple(dims))

    @property
    def in_dim(self) -> int:
        return self.dims[0][0]

    @property
    def layers(self) -> int:
        return len(self.dims)


def param_count(layout: FilterLayout) -> int:
    """Total weights + biases across the layout's layers."""
    return sum(i * o + o for i, o in layout.dims)


@dataclass
class FilterVector:
    flat: Tensor  # (param_count,)
    layout: FilterLayout

    def __post_init__(self):
        if self.flat.shape != (param_count(self.layout),):
            raise ShapeMismatchError(
                "filter_vector", f"{self.flat.shape} for layout needing {param_count(self.layout)}"
            )


@dataclass
class ClusterVoxelGrid:
    features_flat: Tensor  # (g^3, D) mean-pooled features, zero where empty
    occupancy: np.ndarray  # (g, g, g) booleans
    bbox: np.ndarray  # (2, 3) lo/hi corners, meters
    g: int

    def dense(self) -> Tensor:
        """(g, g, g, D) view for the dense-conv oracle path."""
        d = self.features_flat.shape[1]
        return reshape(self.features_flat, (self.g, self.g, self.g, d))


def voxelize_cluster(cluster: Cluster, coords: np.ndarray, feats: Tensor, g: int) -> ClusterVoxelGrid:
    """Mean-pool member features onto a g^3 grid over the cluster bbox."""
    if cluster.size < 1:
        raise ValueError("empty cluster")
    if g < 1:
        raise ValueError(f"grid size must be >= 1, got {g}")
    pts = coords[cluster.members]
    lo = pts.min(axis=0)
    hi = pts.max(axis=0)
    extent = np.maximum(hi - lo, 1e-6)  # degenerate extents padded
    cell = np.minimum(np.floor((pts - lo) / extent * g).astype(np.int64), g - 1)
    flat_ids = (cell[:, 0] * g + cell[:, 1]) * g + cell[:, 2]
    member_feats = take_rows(feats, cluster.members)
    grid_flat = scatter_mean(member_feats, flat_ids, g**3)
    occupancy = np.zeros(g**3, dtype=bool)
    occupancy[flat_ids] = True
    return ClusterVoxelGrid(
        features_flat=grid_flat,
        occupancy=occupancy.reshape(g, g, g),
        bbox=np.stack([lo, hi]),
        g=g,
    )


def _neighbor_tables(occupancy: np.ndarray, g: int) -> list[np.ndarray]:
    """Per conv offset: row index (into occupied rows, sentinel last) of each
    occupied voxel's neighbor. Empty and out-of-bounds neighbors hit the
    sentinel zero row."""
    occ_flat = occupancy.reshape(-1)
    occ_ids = np.flatnonzero(occ_flat)
    n_occ = len(occ_ids)
    row_of = np.full(g**3, n_occ, dtype=np.intp)
    row_of[occ_ids] = np.arange(n_occ)
    xyz = np.stack(np.unravel_index(occ_ids, (g, g, g)), axis=1)
    tables = []
    for dx in (-1, 0, 1):
        for dy in (-1, 0, 1):
            for dz in (-1, 0, 1):
                nbr = xyz + np.array([dx, dy, dz])
                inside = ((nbr >= 0) & (nbr < g)).all(axis=1)
                flat = (nbr[:, 0] * g + nbr[:, 1]) * g + nbr[:, 2]
                rows = np.where(inside, row_of[np.clip(flat, 0, g**3 - 1)], n_occ)
                tables.append(rows)
    return tables


def _conv_kernel_slices(weight: Tensor) -> list[Tensor]:
    """(3,3,3,Cin,Cout) -> 27 matrices (Cin, Cout) in (dx, dy, dz) order."""
    _, _, _, cin, cout = weight.shape
    flat = reshape(weight, (27, cin, cout))
    return [reshape(slice_axis(flat, 0, k, k + 1), (cin, cout)) for k in range(27)]


def _masked_conv(rows: Tensor, tables, weight: Tensor, bias: Tensor) -> Tensor:
    """3x3x3 conv evaluated only at occupied voxels.

    rows: (n_occ, Cin) occupied-voxel features. Neighbor context comes from a
    zero-row-augmented copy, which reproduces zero padding and the zeroing of
    empty voxels of the dense formulation exactly.
    """
    n_occ = rows.shape[0]
    aug = concat([rows, Tensor(np.zeros((1, rows.shape[1])))], axis=0)
    kernels = _conv_kernel_slices(weight)
    out = add(matmul(take_rows(aug, tables[0]), kernels[0]), bias)
    for k in range(1, 27):
        out = add(out, matmul(take_rows(aug, tables[k]), kernels[k]))
    return out


def generate_filters(grid: ClusterVoxelGrid, params: dict[str, Tensor], layout: FilterLayout) -> FilterVector:
    """Run the weight-generator sub-network over one cluster grid."""
    g = grid.g
    occ_flat = grid.occupancy.reshape(-1)
    occ_ids = np.flatnonzero(occ_flat)
    tables = _neighbor_tables(grid.occupancy, g)
    rows = take_rows(grid.features_flat, occ_ids)
    h = relu(_masked_conv(rows, tables, params["gw.conv1.w"], params["gw.conv1.b"]))
    h = _masked_conv(h, tables, params["gw.conv2.w"], params["gw.conv2.b"])
    pooled = reshape(tensor_mean(h, axis=0), (1, h.shape[1]))
    h2 = relu(add(matmul(pooled, params["gw.mlp.l1.w"]), params["gw.mlp.l1.b"]))
    flat = add(matmul(h2, params["gw.mlp.l2.w"]), params["gw.mlp.l2.b"])
    expect = param_count(layout)
    if flat.shape[1] != expect:
        raise ShapeMismatchError("generate_filters", f"network emits {flat.shape[1]}, layout needs {expect}")
    return FilterVector(flat=reshape(flat, (expect,)), layout=layout)


def unpack_filters(fv: FilterVector) -> list[tuple[Tensor, Tensor]]:
    """Flat vector -> per-layer (weight (out, in) row-major, bias (out,))."""
    if fv.flat.shape != (param_count(fv.layout),):
        raise ShapeMismatchError("unpack_filters", f"{fv.flat.shape} vs {param_count(fv.layout)}")
    out = []
    offset = 0
    for in_dim, out_dim in fv.layout.dims:
        w = reshape(slice_axis(fv.flat, 0, offset, offset + in_dim * out_dim), (out_dim, in_dim))
        offset += in_dim * out_dim
        b = slice_axis(fv.flat, 0, offset, offset + out_dim)
        offset += out_dim
        out.append((w, b))
    return out


def position_embed(coords: np.ndarray, centroid: np.ndarray) -> np.ndarray:
    """Per-point coordinate relative to the cluster centroid, meters."""
    return np.asarray(coords, dtype=np.float64) - np.asarray(centroid, dtype=np.float64).reshape(3)


@dataclass
class DecodedInstance:
    logits: Tensor  # (N,), zero where off-category
    probs: Tensor  # (N,), zero where off-category

    @property
    def binary_mask(self) -> np.ndarray:
        return self.probs.values > 0.5


def decode_instance(mask_features: Tensor, f_pos: np.ndarray, fv: FilterVector,
                    category_mask: np.ndarray) -> DecodedInstance:
    """Score every point with the cluster's 1x1 conv stack (Eq.-style decode).

    ReLU between layers, no normalization; the final scalar is a logit.
    Logits and probabilities are zeroed where the category mask is false.
    """
    n, d_mask = mask_features.shape
    if d_mask != fv.layout.in_dim - 3:
        raise ShapeMismatchError(
            "decode_instance", f"mask features dim {d_mask} vs layout in_dim-3 = {fv.layout.in_dim - 3}"
        )
    if f_pos.shape != (n, 3):
        raise ShapeMismatchError("decode_instance", f"f_pos {f_pos.shape} for N={n}")
    category_mask = np.asarray(category_mask, dtype=bool).reshape(n)
    h = concat([mask_features, Tensor(f_pos)], axis=1)
    layers = unpack_filters(fv)
    for w, b in layers[:-1]:
        h = relu(add(matmul(h, transpose(w)), b))
    w_last, b_last = layers[-1]
    raw = reshape(add(matmul(h, transpose(w_last)), b_last), (n,))
    gate = Tensor(category_mask.astype(np.float64))
    return DecodedInstance(logits=mul(raw, gate), probs=mul(sigmoid(raw), gate))
