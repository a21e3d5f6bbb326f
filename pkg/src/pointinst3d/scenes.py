"""Synthetic ground-truth scenes: surface-sampled instances over a floor.

Instance points are sampled on shape surfaces only (box / sphere / ellipsoid
shells); the floor is a z=0 plane of stuff points. Category 0 is the floor;
thing categories are 1..num_thing_classes. Per-point features are the scene-
centered coordinates, the surface normal, and one class-correlated noise
channel, so the backbone sees a learnable semantic signal without absolute
positions leaking in.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "SceneConfig",
    "PointScene",
    "generate_scene",
    "oracle_predictions",
    "scene_instances",
    "save_scene",
    "load_scene",
    "SceneFileError",
]

SCENE_MAGIC = b"PI3DSCNE"
SCENE_VERSION = 1


@dataclass(frozen=True)
class SceneConfig:
    num_instances: tuple[int, int] = (3, 6)
    shapes: tuple[str, ...] = ("box", "sphere", "ellipsoid")
    size_range: tuple[float, float] = (0.2, 0.45)
    d_min: float = 1.0
    extent: float = 4.0
    stuff_density: float = 40.0  # floor points per square meter; 0 disables the floor
    offset_sigma: float = 0.0
    label_noise: float = 0.0
    points_per_instance: tuple[int, int] = (120, 240)
    num_thing_classes: int = 4
    class_noise_sigma: float = 0.25
    seed: int = 0

    def __post_init__(self):
        if self.d_min <= 0:
            raise ValueError("d_min must be > 0")
        if self.offset_sigma < 0 or self.label_noise < 0:
            raise ValueError("noise parameters must be >= 0")
        unknown = set(self.shapes) - {"box", "sphere", "ellipsoid"}
        if unknown:
            raise ValueError(f"unknown shapes: {sorted(unknown)}")

    @property
    def num_classes(self) -> int:
        return self.num_thing_classes + 1


@dataclass
class PointScene:
    coords: np.ndarray  # (N, 3) meters
    features: np.ndarray  # (N, I)
    gt_semantic: np.ndarray  # (N,) ints, 0 = floor
    gt_instance: np.ndarray  # (N,) ints, -1 for stuff
    gt_centroids: np.ndarray  # (N, 3) per-point instance centroid
    num_classes: int
    seed: int
    config: SceneConfig | None = None
    instance_shapes: list[dict] | None = None  # sampling provenance; not serialized

    @property
    def n_points(self) -> int:
        return len(self.coords)

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]


class SceneFileError(Exception):
    pass


def _sample_sphere(rng, center, radius, n):
    dirs = rng.normal(size=(n, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return center + radius * dirs, dirs


def _sample_ellipsoid(rng, center, radii, n):
    dirs = rng.normal(size=(n, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    pts = center + radii * dirs
    normals = dirs / radii
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return pts, normals


def _sample_box(rng, center, half, n):
    areas = np.array([half[1] * half[2], half[1] * half[2],
                      half[0] * half[2], half[0] * half[2],
                      half[0] * half[1], half[0] * half[1]])
    faces = rng.choice(6, size=n, p=areas / areas.sum())
    pts = rng.uniform(-1.0, 1.0, size=(n, 3)) * half
    normals = np.zeros((n, 3))
    for f in range(6):
        axis, sign = divmod(f, 2)
        sel = faces == f
        pts[sel, axis] = half[axis] if sign == 0 else -half[axis]
        normals[sel, axis] = 1.0 if sign == 0 else -1.0
    return center + pts, normals


def _place_instances(rng, cfg: SceneConfig):
    """Shape specs with same-class center separation >= 1.05 * d_min."""
    count = int(rng.integers(cfg.num_instances[0], cfg.num_instances[1] + 1))
    specs = []
    for _ in range(count):
        cls = int(rng.integers(1, cfg.num_thing_classes + 1))
        shape = cfg.shapes[int(rng.integers(len(cfg.shapes)))]
        if shape == "sphere":
            radii = np.full(3, rng.uniform(*cfg.size_range))
        else:
            radii = rng.uniform(*cfg.size_range, size=3)
        size = float(radii.max())
        for _attempt in range(200):
            center = np.array([
                rng.uniform(size, cfg.extent - size),
                rng.uniform(size, cfg.extent - size),
                rng.uniform(size + 0.05, size + 1.2),
            ])
            ok = all(
                np.linalg.norm(center - s["center"]) >= 1.05 * cfg.d_min
                for s in specs if s["cls"] == cls
            )
            if ok:
                break
        else:
            raise RuntimeError(f"could not place instance {len(specs)} with d_min {cfg.d_min}")
        specs.append({"cls": cls, "shape": shape, "radii": radii, "center": center})
    return specs


def generate_scene(cfg: SceneConfig) -> PointScene:
    """Deterministic per seed; same-class instance centroids >= d_min apart.

    The d_min guarantee is enforced on the actual per-instance mean of the
    sampled points (what gt_centroids stores), with bounded rescene retries.
    """
    rng = np.random.default_rng(cfg.seed)
    for _retry in range(50):
        specs = _place_instances(rng, cfg)
        parts = []
        means = []
        for inst_id, spec in enumerate(specs):
            n = int(rng.integers(cfg.points_per_instance[0], cfg.points_per_instance[1] + 1))
            sampler = {"box": _sample_box, "sphere": _sample_sphere, "ellipsoid": _sample_ellipsoid}[spec["shape"]]
            arg = spec["radii"][0] if spec["shape"] == "sphere" else spec["radii"]
            pts, normals = sampler(rng, spec["center"], arg, n)
            parts.append((inst_id, spec["cls"], pts, normals))
            means.append(pts.mean(axis=0))
        separated = True
        for a in range(len(specs)):
            for b in range(a + 1, len(specs)):
                if specs[a]["cls"] == specs[b]["cls"] and np.linalg.norm(means[a] - means[b]) < cfg.d_min:
                    separated = False
        if separated:
            break
    else:
        raise RuntimeError(f"seed {cfg.seed}: could not separate same-class centroids by {cfg.d_min}")

    coords_list, normal_list, sem_list, inst_list = [], [], [], []
    for inst_id, cls, pts, normals in parts:
        coords_list.append(pts)
        normal_list.append(normals)
        sem_list.append(np.full(len(pts), cls, dtype=np.int64))
        inst_list.append(np.full(len(pts), inst_id, dtype=np.int64))

    n_floor = int(round(cfg.stuff_density * cfg.extent * cfg.extent))
    if n_floor > 0:
        floor = np.zeros((n_floor, 3))
        floor[:, 0] = rng.uniform(0.0, cfg.extent, n_floor)
        floor[:, 1] = rng.uniform(0.0, cfg.extent, n_floor)
        coords_list.append(floor)
        normal_list.append(np.tile([0.0, 0.0, 1.0], (n_floor, 1)))
        sem_list.append(np.zeros(n_floor, dtype=np.int64))
        inst_list.append(np.full(n_floor, -1, dtype=np.int64))

    if not coords_list:
        raise ValueError("empty scene: zero instances and no floor")
    coords = np.concatenate(coords_list)
    normals = np.concatenate(normal_list)
    gt_semantic = np.concatenate(sem_list)
    gt_instance = np.concatenate(inst_list)

    gt_centroids = coords.copy()  # stuff rows: the point itself (never supervised)
    for inst_id, _, _, _ in parts:
        sel = gt_instance == inst_id
        gt_centroids[sel] = coords[sel].mean(axis=0)

    class_channel = gt_semantic + rng.normal(0.0, cfg.class_noise_sigma, len(coords))
    centered = coords - coords.mean(axis=0)
    features = np.concatenate([centered, normals, class_channel[:, None]], axis=1)

    return PointScene(
        coords=coords,
        features=features,
        gt_semantic=gt_semantic,
        gt_instance=gt_instance,
        gt_centroids=gt_centroids,
        num_classes=cfg.num_classes,
        seed=cfg.seed,
        config=cfg,
        instance_shapes=specs,
    )


def oracle_predictions(scene: PointScene, offset_sigma: float | None = None,
                       label_noise: float | None = None, seed: int = 0):
    """Ground-truth-derived head outputs for verification runs.

    Returns (semantic logits, offsets): one-hot logits scaled by 10 from
    gt_semantic, offsets = gt_centroids - coords, each optionally corrupted
    by the configured noise. Defaults come from the scene's config.
    """
    cfg = scene.config
    if offset_sigma is None:
        offset_sigma = cfg.offset_sigma if cfg else 0.0
    if label_noise is None:
        label_noise = cfg.label_noise if cfg else 0.0
    rng = np.random.default_rng(seed)
    labels = scene.gt_semantic.copy()
    if label_noise > 0:
        flip = rng.random(scene.n_points) < label_noise
        labels[flip] = rng.integers(0, scene.num_classes, flip.sum())
    logits = np.zeros((scene.n_points, scene.num_classes))
    logits[np.arange(scene.n_points), labels] = 10.0
    offsets = scene.gt_centroids - scene.coords
    if offset_sigma > 0:
        offsets = offsets + rng.normal(0.0, offset_sigma, offsets.shape)
    return logits, offsets


def scene_instances(scene: PointScene) -> list[tuple[int, int, np.ndarray]]:
    """Ground-truth instances as (instance id, category, boolean mask)."""
    out = []
    for inst_id in np.unique(scene.gt_instance):
        if inst_id < 0:
            continue
        mask = scene.gt_instance == inst_id
        category = int(scene.gt_semantic[mask][0])
        out.append((int(inst_id), category, mask))
    return out


# ---------------------------------------------------------------------------
# binary scene files


def save_scene(path: str | Path, scene: PointScene) -> None:
    n, dim = scene.n_points, scene.feature_dim
    header = SCENE_MAGIC + struct.pack("<IIIIq", SCENE_VERSION, n, scene.num_classes, dim, scene.seed)
    body = np.zeros(n, dtype=_record_dtype(dim))
    body["coords"] = scene.coords
    body["features"] = scene.features
    body["semantic"] = scene.gt_semantic
    body["instance"] = scene.gt_instance
    body["centroid"] = scene.gt_centroids
    Path(path).write_bytes(header + body.tobytes())


def load_scene(path: str | Path) -> PointScene:
    data = Path(path).read_bytes()
    if data[:8] != SCENE_MAGIC:
        raise SceneFileError(f"{path}: bad magic {data[:8]!r}")
    version, n, num_classes, dim, seed = struct.unpack_from("<IIIIq", data, 8)
    if version != SCENE_VERSION:
        raise SceneFileError(f"{path}: unsupported version {version}")
    dtype = _record_dtype(dim)
    expected = 32 + n * dtype.itemsize
    if len(data) != expected:
        raise SceneFileError(f"{path}: expected {expected} bytes, found {len(data)}")
    body = np.frombuffer(data, dtype=dtype, count=n, offset=32)
    return PointScene(
        coords=body["coords"].astype(np.float64),
        features=body["features"].astype(np.float64),
        gt_semantic=body["semantic"].astype(np.int64),
        gt_instance=body["instance"].astype(np.int64),
        gt_centroids=body["centroid"].astype(np.float64),
        num_classes=int(num_classes),
        seed=int(seed),
        config=None,
    )


def _record_dtype(feature_dim: int) -> np.dtype:
    return np.dtype([
        ("coords", "<f8", (3,)),
        ("features", "<f8", (feature_dim,)),
        ("semantic", "<i4"),
        ("instance", "<i4"),
        ("centroid", "<f8", (3,)),
    ])
