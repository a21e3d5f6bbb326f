"""Built-in verification suites behind the grad-check / selfcheck commands.

grad-check: finite-difference validation of every differentiable op and of
the composite modules and losses. selfcheck: oracle-equivalence runs pairing
each fast implementation with its independent reference.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from . import oracles
from .attention import AttentionConfig, init_mhsa_params, mhsa_forward
from .autodiff import (
    Tensor,
    bce_with_logits,
    concat,
    conv3d,
    div,
    gradient_check,
    layer_norm,
    log,
    log_softmax,
    matmul,
    mul,
    relu,
    reshape,
    scatter_mean,
    sigmoid,
    slice_axis,
    softmax,
    sqrt,
    take_rows,
    tensor_mean,
    tensor_sum,
    transpose,
)
from .backbone import ModelConfig, backbone_forward, init_model_params, semantic_labels
from .clustering import (
    ClusteringConfig,
    canonical_partition,
    cluster_bruteforce_oracle,
    cluster_homogeneous,
)
from .dynamic_head import (
    FilterLayout,
    FilterVector,
    decode_instance,
    generate_filters,
    param_count,
    position_embed,
    unpack_filters,
    voxelize_cluster,
)
from .grid import build_grid_index, radius_neighbors
from .losses import (
    assign_targets,
    centroid_loss,
    dice_loss,
    loss_forward,
    mask_loss,
    semantic_loss,
)
from .metrics import ScoredInstance, TruthInstance, average_precision
from .pipeline import InstancePrediction, nms
from .scenes import SceneConfig, generate_scene

GRAD_TOL = 1e-4
EPSILON = 1e-5


@dataclass
class CheckResult:
    name: str
    ok: bool
    detail: str


def _tiny_scene(seed: int, n_target: int = 40) -> "PointScene":
    cfg = SceneConfig(
        num_instances=(2, 3),
        size_range=(0.2, 0.3),
        d_min=0.8,
        extent=2.5,
        stuff_density=n_target / 12.0,
        points_per_instance=(8, 14),
        num_thing_classes=3,
        seed=seed,
    )
    return generate_scene(cfg)


_TINY_MODEL = ModelConfig(
    in_features=7, num_classes=4, feat_dim=8, mask_dim=4, heads=2,
    transformer_layers=1, token_cell=0.8, encoder_hidden=10, head_hidden=8,
    gw_channels=4, gw_hidden=8, decoder_layers=3, decoder_hidden=4, grid_size=4,
)
_TINY_CLUSTER = ClusteringConfig(radius=0.3, stuff_labels=frozenset({0}), min_report_size=1)


def _param_gradient(build_scalar, params: dict[str, Tensor], name: str) -> float:
    def f(t: Tensor) -> Tensor:
        trial = dict(params)
        trial[name] = t
        return build_scalar(trial)

    return gradient_check(f, params[name], EPSILON)


def _generic_params(cfg: ModelConfig, seed: int) -> dict[str, Tensor]:
    """Init params jittered everywhere (biases included) so check points are
    generic: zero-initialized biases park ReLU pre-activations exactly on
    their kink, where finite differences legitimately disagree."""
    rng = np.random.default_rng([seed, 77])
    params = init_model_params(cfg, seed)
    return {k: Tensor(v.values + rng.normal(0.0, 0.2, v.shape), requires_grad=True)
            for k, v in params.items()}


# ---------------------------------------------------------------------------
# gradient suite


def _op_case_makers():
    """name -> maker(rng) -> (f, point). Constants are frozen per instance so
    f is a fixed function of its argument (finite differences need that)."""

    def make_add(rng):
        c = Tensor(rng.normal(size=(2, 3)))
        return (lambda x: tensor_sum(mul(x + c, x))), Tensor(rng.normal(size=(2, 3)))

    def make_sub(rng):
        c = Tensor(rng.normal(size=(2, 3)))
        return (lambda x: tensor_sum(mul(x - c, x))), Tensor(rng.normal(size=(2, 3)))

    def make_mul(rng):
        return (lambda x: tensor_sum(mul(x, x))), Tensor(rng.normal(size=(2, 3)))

    def make_div(rng):
        c = Tensor(rng.normal(size=(2, 3)))
        return (lambda x: tensor_sum(div(c, x))), Tensor(np.abs(rng.normal(size=(2, 3))) + 0.5)

    def make_neg(rng):
        return (lambda x: tensor_sum(mul(-x, x))), Tensor(rng.normal(size=(2, 3)))

    def make_matmul(rng):
        c = Tensor(rng.normal(size=(3, 2)))
        return (lambda x: tensor_sum(mul(matmul(x, c), matmul(x, c)))), Tensor(rng.normal(size=(2, 3)))

    def make_relu(rng):
        return (lambda x: tensor_sum(mul(relu(x), x))), Tensor(rng.normal(size=(7,)))

    def make_sigmoid(rng):
        return (lambda x: tensor_sum(sigmoid(x))), Tensor(rng.normal(size=(5,)))

    def make_log(rng):
        return (lambda x: tensor_sum(log(x))), Tensor(np.abs(rng.normal(size=(5,))) + 0.5)

    def make_sqrt(rng):
        return (lambda x: tensor_sum(sqrt(x))), Tensor(np.abs(rng.normal(size=(5,))) + 0.5)

    def make_softmax(rng):
        c = Tensor(rng.normal(size=(2, 4)))
        return (lambda x: tensor_sum(mul(softmax(x, axis=1), c))), Tensor(rng.normal(size=(2, 4)))

    def make_log_softmax(rng):
        c = Tensor(rng.normal(size=(2, 4)))
        return (lambda x: tensor_sum(mul(log_softmax(x, axis=1), c))), Tensor(rng.normal(size=(2, 4)))

    def make_bce(rng):
        t = Tensor(rng.random((6,)))
        return (lambda x: tensor_sum(bce_with_logits(x, t))), Tensor(rng.normal(size=(6,)))

    def make_sum_axis(rng):
        c = Tensor(rng.normal(size=(3,)))
        return (lambda x: tensor_sum(mul(tensor_sum(x, axis=0), c))), Tensor(rng.normal(size=(2, 3)))

    def make_mean_axis(rng):
        c = Tensor(rng.normal(size=(2,)))
        return (lambda x: tensor_sum(mul(tensor_mean(x, axis=1), c))), Tensor(rng.normal(size=(2, 3)))

    def make_concat(rng):
        c = Tensor(rng.normal(size=(4, 3)))
        return (lambda x: tensor_sum(mul(concat([x, x], axis=0), c))), Tensor(rng.normal(size=(2, 3)))

    def make_slice(rng):
        c = Tensor(rng.normal(size=(2, 2)))
        return (lambda x: tensor_sum(mul(slice_axis(x, 1, 1, 3), c))), Tensor(rng.normal(size=(2, 4)))

    def make_take_rows(rng):
        c = Tensor(rng.normal(size=(4, 2)))
        return (lambda x: tensor_sum(mul(take_rows(x, [0, 2, 2, 1]), c))), Tensor(rng.normal(size=(3, 2)))

    def make_scatter_mean(rng):
        c = Tensor(rng.normal(size=(3, 2)))
        return (lambda x: tensor_sum(mul(scatter_mean(x, [0, 0, 2, 1], 3), c))), Tensor(rng.normal(size=(4, 2)))

    def make_reshape(rng):
        c = Tensor(rng.normal(size=(6,)))
        return (lambda x: tensor_sum(mul(reshape(x, (6,)), c))), Tensor(rng.normal(size=(2, 3)))

    def make_transpose(rng):
        c = Tensor(rng.normal(size=(3, 2)))
        return (lambda x: tensor_sum(mul(transpose(x), c))), Tensor(rng.normal(size=(2, 3)))

    def make_conv3d(rng):
        w = Tensor(rng.normal(size=(3, 3, 3, 2, 2)))
        b = Tensor(rng.normal(size=(2,)))
        c = Tensor(rng.normal(size=(3, 3, 3, 2)))
        return (lambda x: tensor_sum(mul(conv3d(x, w, b), c))), Tensor(rng.normal(size=(3, 3, 3, 2)))

    def make_layer_norm(rng):
        gain = Tensor(rng.normal(size=(4,)))
        bias = Tensor(rng.normal(size=(4,)))
        c = Tensor(rng.normal(size=(3, 4)))
        return (lambda x: tensor_sum(mul(layer_norm(x, gain, bias), c))), Tensor(rng.normal(size=(3, 4)))

    return {
        "add": make_add, "sub": make_sub, "mul": make_mul, "div": make_div,
        "neg": make_neg, "matmul": make_matmul, "relu": make_relu,
        "sigmoid": make_sigmoid, "log": make_log, "sqrt": make_sqrt,
        "softmax": make_softmax, "log_softmax": make_log_softmax,
        "bce_with_logits": make_bce, "sum_axis": make_sum_axis,
        "mean_axis": make_mean_axis, "concat": make_concat, "slice": make_slice,
        "take_rows": make_take_rows, "scatter_mean": make_scatter_mean,
        "reshape": make_reshape, "transpose": make_transpose,
        "conv3d": make_conv3d, "layer_norm": make_layer_norm,
    }


def op_gradient_suite(seed: int = 0, points_per_op: int = 100) -> list[tuple[str, float]]:
    """Max relative gradient error per differentiable op over random points."""
    results = []
    for name, maker in _op_case_makers().items():
        rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
        worst = 0.0
        for _ in range(points_per_op):
            f, point = maker(rng)
            worst = max(worst, gradient_check(f, point, EPSILON))
        results.append((name, worst))
    return results


def module_gradient_suite(seed: int = 0, instances: int = 5) -> list[tuple[str, float]]:
    """Composite modules and losses against finite differences."""
    rng = np.random.default_rng(seed)
    results: list[tuple[str, float]] = []

    # MHSA block, w.r.t. the tokens
    worst = 0.0
    cfg = AttentionConfig(dim=8, heads=2)
    for i in range(instances):
        params = init_mhsa_params(np.random.default_rng(seed + i), cfg, "a.")
        rel = Tensor(rng.normal(size=(5, 5, 3)))

        def f(tokens):
            return tensor_sum(mul(mhsa_forward(tokens, params, rel, cfg, "a."),
                                  Tensor(np.random.default_rng(seed + i).normal(size=(5, 8)))))

        worst = max(worst, gradient_check(f, Tensor(rng.normal(size=(5, 8))), EPSILON))
    results.append(("mhsa", worst))

    # backbone heads + encoder + G_w + decoder + every loss, on tiny scenes
    worst_by = {"backbone": 0.0, "gw": 0.0, "decoder": 0.0, "semantic_loss": 0.0,
                "centroid_loss": 0.0, "mask_loss": 0.0, "dice_loss": 0.0, "total_loss": 0.0}
    for i in range(instances):
        scene = _tiny_scene(seed + 10 + i)
        params = _generic_params(_TINY_MODEL, seed + i)

        def backbone_scalar(p):
            out = backbone_forward(scene, p, _TINY_MODEL)
            return tensor_sum(out.semantic_logits) + tensor_sum(out.offsets) + tensor_sum(mul(out.mask_features, out.mask_features))

        worst_by["backbone"] = max(worst_by["backbone"],
                                   _param_gradient(backbone_scalar, params, "enc.l2.b"),
                                   _param_gradient(backbone_scalar, params, "head.off.l2.b"))

        bd, total, state = loss_forward(scene, params, _TINY_MODEL, _TINY_CLUSTER)

        def total_scalar(p):
            _, t, _ = loss_forward(scene, p, _TINY_MODEL, _TINY_CLUSTER, frozen=state)
            return t

        worst_by["total_loss"] = max(worst_by["total_loss"],
                                     _param_gradient(total_scalar, params, "head.sem.l2.b"),
                                     _param_gradient(total_scalar, params, "gw.conv2.b"))

        if state.clusters:
            cluster = state.clusters[0]
            layout = FilterLayout.for_decoder(_TINY_MODEL.mask_dim, _TINY_MODEL.decoder_width,
                                              _TINY_MODEL.decoder_layers)

            def gw_scalar(p):
                out = backbone_forward(scene, p, _TINY_MODEL)
                grid = voxelize_cluster(cluster, scene.coords, out.point_features, _TINY_MODEL.grid_size)
                return tensor_sum(generate_filters(grid, p, layout).flat)

            worst_by["gw"] = max(worst_by["gw"], _param_gradient(gw_scalar, params, "gw.conv1.b"))

            n = scene.n_points
            b_z = state.l_seg == cluster.label
            f_pos = position_embed(scene.coords, cluster.centroid)
            feats_const = rng.normal(size=(n, _TINY_MODEL.mask_dim))

            def decoder_scalar(flat):
                fv = FilterVector(flat=flat, layout=layout)
                dec = decode_instance(Tensor(feats_const), f_pos, fv, b_z)
                return tensor_sum(dec.logits) + tensor_sum(dec.probs)

            point = Tensor(rng.normal(size=(param_count(layout),)))
            worst_by["decoder"] = max(worst_by["decoder"], gradient_check(decoder_scalar, point, EPSILON))

        # individual losses on raw random head outputs
        n = scene.n_points
        logits0 = rng.normal(size=(n, _TINY_MODEL.num_classes))
        worst_by["semantic_loss"] = max(worst_by["semantic_loss"], gradient_check(
            lambda t: semantic_loss(t, scene.gt_semantic), Tensor(logits0), EPSILON))
        valid = scene.gt_instance >= 0
        worst_by["centroid_loss"] = max(worst_by["centroid_loss"], gradient_check(
            lambda t: centroid_loss(scene.coords, t, scene.gt_centroids, valid),
            Tensor(rng.normal(size=(n, 3))), EPSILON))
        if state.clusters:
            targets = state.targets
            labels = [c.label for c in state.clusters]
            k = len(state.clusters)
            worst_by["mask_loss"] = max(worst_by["mask_loss"], gradient_check(
                lambda t: mask_loss([reshape(slice_axis(t, 0, j * n, (j + 1) * n), (n,)) for j in range(k)],
                                    targets, state.l_seg, labels),
                Tensor(rng.normal(size=(k * n,))), EPSILON))
            worst_by["dice_loss"] = max(worst_by["dice_loss"], gradient_check(
                lambda t: dice_loss([sigmoid(reshape(slice_axis(t, 0, j * n, (j + 1) * n), (n,))) for j in range(k)],
                                    targets, state.l_seg, labels),
                Tensor(rng.normal(size=(k * n,))), EPSILON))
    results.extend(sorted(worst_by.items()))
    return results


def run_grad_checks(seed: int = 0) -> list[CheckResult]:
    out = []
    for name, err in op_gradient_suite(seed, points_per_op=25) + module_gradient_suite(seed, instances=3):
        out.append(CheckResult(f"grad/{name}", err <= GRAD_TOL, f"max rel err {err:.3e}"))
    return out


# ---------------------------------------------------------------------------
# oracle-equivalence suite


def run_self_checks(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results: list[CheckResult] = []

    def record(name, ok, detail=""):
        results.append(CheckResult(name, bool(ok), detail))

    # radius queries vs linear scan
    ok = True
    for trial in range(20):
        coords = rng.uniform(-1, 1, size=(200, 3))
        index = build_grid_index(coords, cell_size=rng.uniform(0.05, 0.4))
        for _ in range(5):
            q = rng.uniform(-1, 1, size=3)
            r = rng.uniform(0.05, 0.6)
            fast = set(radius_neighbors(index, q, r).tolist())
            slow = set(oracles.linear_scan_neighbors(coords, q, r).tolist())
            ok = ok and fast == slow
    record("grid/radius-vs-linear-scan", ok)

    # clustering vs union-find
    ok = True
    for trial in range(20):
        n = int(rng.integers(50, 300))
        coords = rng.uniform(0, 3, size=(n, 3))
        offsets = rng.normal(0, 0.15, size=(n, 3))
        labels = rng.integers(0, 4, size=n)
        cfg = ClusteringConfig(radius=float(rng.uniform(0.05, 0.5)), stuff_labels=frozenset({0}),
                               min_report_size=1)
        fast = canonical_partition(cluster_homogeneous(coords, offsets, labels, cfg))
        slow = canonical_partition(cluster_bruteforce_oracle(coords, offsets, labels, cfg))
        ok = ok and fast == slow
    record("clustering/bfs-vs-union-find", ok)

    # voxelization vs explicit bucketing
    from .clustering import Cluster

    pts = rng.uniform(0, 1, size=(120, 3))
    feats = rng.normal(size=(120, 6))
    cluster = Cluster(members=np.arange(120, dtype=np.intp), centroid=pts.mean(axis=0), label=1)
    grid = voxelize_cluster(cluster, pts, Tensor(feats), g=5)
    ref_grid, ref_occ = oracles.bucketed_voxel_means(pts, feats, g=5)
    record("dynamic-head/voxelize-vs-bucketing",
           np.allclose(grid.features_flat.values, ref_grid, atol=1e-12)
           and np.array_equal(grid.occupancy.reshape(-1), ref_occ))

    # masked sparse conv vs dense conv3d + occupancy zeroing
    from .dynamic_head import _masked_conv, _neighbor_tables

    g = 4
    occ = rng.random((g, g, g)) < 0.4
    occ.reshape(-1)[0] = True  # at least one occupied voxel
    dense = rng.normal(size=(g, g, g, 3)) * occ[..., None]
    w = Tensor(rng.normal(size=(3, 3, 3, 3, 2)))
    b = Tensor(rng.normal(size=(2,)))
    occ_ids = np.flatnonzero(occ.reshape(-1))
    rows = Tensor(dense.reshape(-1, 3)[occ_ids])
    sparse_out = _masked_conv(rows, _neighbor_tables(occ, g), w, b)
    dense_out = conv3d(Tensor(dense), w, b).values.reshape(-1, 2)[occ_ids]
    record("dynamic-head/sparse-conv-vs-dense", np.allclose(sparse_out.values, dense_out, atol=1e-10))

    # decoder vs per-point loop; unpack round-trip vs cursor oracle
    layout = FilterLayout.for_decoder(4, 4, 3)
    flat = rng.normal(size=(param_count(layout),))
    n = 30
    feats = rng.normal(size=(n, 4))
    f_pos = rng.normal(size=(n, 3))
    b_z = rng.random(n) < 0.6
    dec = decode_instance(Tensor(feats), f_pos, FilterVector(flat=Tensor(flat), layout=layout), b_z)
    ref_logits, ref_probs = oracles.naive_decode(feats, f_pos, flat, list(layout.dims), b_z)
    record("dynamic-head/decode-vs-loop",
           np.allclose(dec.logits.values, ref_logits, atol=1e-12)
           and np.allclose(dec.probs.values, ref_probs, atol=1e-12))
    packed = unpack_filters(FilterVector(flat=Tensor(flat), layout=layout))
    ref_layers = oracles.naive_unpack(flat, list(layout.dims))
    ok = all(np.array_equal(w.values, rw) and np.array_equal(bb.values, rb)
             for (w, bb), (rw, rb) in zip(packed, ref_layers))
    record("dynamic-head/unpack-vs-cursor-oracle", ok)

    # Eq-style parameter counts vs independent summation
    ok = param_count(FilterLayout.for_decoder(8, 8, 3)) == 177
    for mask_dim in (2, 4, 8, 16, 32):
        for layers in (2, 3, 4, 5):
            got = param_count(FilterLayout.for_decoder(mask_dim, mask_dim, layers))
            ok = ok and got == oracles.param_count_by_summation(mask_dim, mask_dim, layers)
    record("dynamic-head/param-count-grid", ok)

    # AP vs prefix-enumeration oracle
    ok = True
    for trial in range(50):
        preds, gts = _random_eval_set(np.random.default_rng(seed + trial))
        for category in (0, 1):
            for threshold in (0.25, 0.5):
                fast = average_precision(preds, gts, threshold, category)
                slow = oracles.prefix_ap_oracle(preds, gts, threshold, category)
                if fast is None or slow is None:
                    ok = ok and fast == slow
                else:
                    ok = ok and abs(fast - slow) < 1e-10
    record("metrics/ap-vs-prefix-oracle", ok)

    # NMS vs quadratic reference
    ok = True
    for trial in range(20):
        preds = _random_preds(np.random.default_rng(seed + 100 + trial))
        fast = nms(preds, 0.3)
        slow = oracles.quadratic_nms(preds, 0.3)
        ok = ok and [p.key() for p in fast] == [p.key() for p in slow]
    record("pipeline/nms-vs-quadratic", ok)

    return results


def _random_eval_set(rng):
    n = 40
    gts = []
    for k in range(int(rng.integers(1, 5))):
        mask = np.zeros(n, dtype=bool)
        mask[rng.choice(n, size=int(rng.integers(3, 10)), replace=False)] = True
        gts.append(TruthInstance(scene=0, category=int(rng.integers(0, 2)), mask=mask))
    preds = []
    for k in range(int(rng.integers(0, 8))):
        mask = np.zeros(n, dtype=bool)
        mask[rng.choice(n, size=int(rng.integers(3, 10)), replace=False)] = True
        preds.append(ScoredInstance(scene=0, category=int(rng.integers(0, 2)),
                                    score=float(rng.random()), mask=mask))
    return preds, gts


def _random_preds(rng):
    n = 30
    preds = []
    for k in range(int(rng.integers(1, 10))):
        mask = np.zeros(n, dtype=bool)
        mask[rng.choice(n, size=int(rng.integers(2, 12)), replace=False)] = True
        preds.append(InstancePrediction(mask=mask, category=int(rng.integers(0, 3)),
                                        score=float(rng.random()), source_cluster=k))
    return preds
