import numpy as np
import pytest

from pointinst3d.autodiff import ShapeMismatchError, Tensor, gradient_check, tensor_sum
from pointinst3d.backbone import (
    ModelConfig,
    backbone_forward,
    bottleneck_transformer,
    encode_points,
    heads,
    init_model_params,
    semantic_labels,
)
from pointinst3d.scenes import PointScene, SceneConfig, generate_scene

CFG = ModelConfig(in_features=7, num_classes=4, feat_dim=8, mask_dim=4, heads=2,
                  transformer_layers=1, token_cell=0.6, encoder_hidden=10,
                  head_hidden=8, gw_channels=4, gw_hidden=8, decoder_hidden=4,
                  grid_size=4)


def tiny_scene(seed=0):
    return generate_scene(SceneConfig(
        num_instances=(2, 3), size_range=(0.2, 0.3), d_min=0.8, extent=2.5,
        stuff_density=4.0, points_per_instance=(10, 16), num_thing_classes=3, seed=seed,
    ))


def manual_scene(coords, features):
    coords = np.asarray(coords, dtype=np.float64)
    n = len(coords)
    return PointScene(
        coords=coords,
        features=np.asarray(features, dtype=np.float64),
        gt_semantic=np.ones(n, dtype=np.int64),
        gt_instance=np.zeros(n, dtype=np.int64),
        gt_centroids=np.tile(coords.mean(axis=0), (n, 1)),
        num_classes=4,
        seed=0,
    )


def test_single_point_global_mean_is_own_feature():
    scene = manual_scene([[1.0, 2.0, 3.0]], np.arange(7.0).reshape(1, 7))
    params = init_model_params(CFG, seed=0)
    out = encode_points(scene, params, CFG)
    assert out.shape == (1, CFG.feat_dim)
    # for N=1 the (point, global-mean) halves coincide; doubling the first
    # half of the input weights and zeroing the second gives the same output
    w1 = params["enc.l1.w"].values
    half = w1.shape[0] // 2
    alt = dict(params)
    merged = np.zeros_like(w1)
    merged[:half] = w1[:half] + w1[half:]
    alt["enc.l1.w"] = Tensor(merged)
    assert np.allclose(encode_points(scene, alt, CFG).values, out.values, atol=1e-12)


def test_duplicated_points_identical_rows():
    feats = np.random.default_rng(0).normal(size=(1, 7))
    scene = manual_scene([[0.5, 0.5, 0.5], [0.5, 0.5, 0.5]], np.tile(feats, (2, 1)))
    params = init_model_params(CFG, seed=1)
    out = backbone_forward(scene, params, CFG)
    assert np.array_equal(out.point_features.values[0], out.point_features.values[1])
    assert np.array_equal(out.semantic_logits.values[0], out.semantic_logits.values[1])
    assert np.array_equal(out.offsets.values[0], out.offsets.values[1])


def test_permutation_equivariance():
    scene = tiny_scene(2)
    params = init_model_params(CFG, seed=2)
    out = backbone_forward(scene, params, CFG)
    rng = np.random.default_rng(3)
    perm = rng.permutation(scene.n_points)
    permuted = PointScene(
        coords=scene.coords[perm], features=scene.features[perm],
        gt_semantic=scene.gt_semantic[perm], gt_instance=scene.gt_instance[perm],
        gt_centroids=scene.gt_centroids[perm], num_classes=scene.num_classes, seed=scene.seed,
    )
    out_p = backbone_forward(permuted, params, CFG)
    assert np.allclose(out_p.point_features.values, out.point_features.values[perm], atol=1e-11)
    assert np.allclose(out_p.offsets.values, out.offsets.values[perm], atol=1e-11)
    assert np.allclose(out_p.mask_features.values, out.mask_features.values[perm], atol=1e-11)


def test_translation_invariance():
    scene = tiny_scene(4)
    params = init_model_params(CFG, seed=4)
    out = backbone_forward(scene, params, CFG)
    shifted = PointScene(
        coords=scene.coords + np.array([13.0, -4.0, 2.5]), features=scene.features,
        gt_semantic=scene.gt_semantic, gt_instance=scene.gt_instance,
        gt_centroids=scene.gt_centroids, num_classes=scene.num_classes, seed=scene.seed,
    )
    out_s = backbone_forward(shifted, params, CFG)
    assert np.allclose(out_s.semantic_logits.values, out.semantic_logits.values, atol=1e-9)
    assert np.allclose(out_s.offsets.values, out.offsets.values, atol=1e-9)


def test_zero_weights_zero_outputs():
    scene = tiny_scene(5)
    params = init_model_params(CFG, seed=5)
    zeroed = {k: Tensor(np.zeros(v.shape)) for k, v in params.items()}
    out = backbone_forward(scene, zeroed, CFG)
    assert np.all(out.semantic_logits.values == 0.0)
    assert np.all(out.offsets.values == 0.0)
    assert np.all(out.mask_features.values == 0.0)


def test_argmax_tie_breaks_to_lowest_class():
    logits = np.zeros((3, 4))
    logits[1, 2] = 1.0
    labels = semantic_labels(logits)
    assert labels.tolist() == [0, 2, 0]


def test_single_occupied_token_formula():
    # coincident points guarantee one occupied token cell (centering maps the
    # mean onto a cell corner, so merely-close points straddle cells)
    rng = np.random.default_rng(6)
    coords = np.tile([[0.7, 0.2, 0.9]], (5, 1))
    feats = Tensor(rng.normal(size=(5, CFG.feat_dim)))
    params = init_model_params(CFG, seed=6)
    out = bottleneck_transformer(feats, coords, params, CFG)

    from pointinst3d.attention import mhsa_forward

    token = Tensor(feats.values.mean(axis=0, keepdims=True))
    rel = Tensor(np.zeros((1, 1, 3)))
    y = mhsa_forward(token, params, rel, CFG.attention, prefix="tf0.")
    assert np.allclose(out.values, feats.values + y.values, atol=1e-12)


def test_token_symmetry_for_mirrored_groups():
    # two identical, well-separated groups: swapping them swaps outputs
    rng = np.random.default_rng(7)
    group = rng.uniform(0, 0.2, size=(6, 3))
    coords = np.concatenate([group, group + np.array([3.0, 0, 0])])
    feat_rows = rng.normal(size=(6, CFG.feat_dim))
    feats = Tensor(np.concatenate([feat_rows, feat_rows]))
    params = init_model_params(CFG, seed=7)
    out = bottleneck_transformer(feats, coords, params, CFG).values
    assert np.allclose(out[:6], out[6:], atol=1e-10)


def test_heads_shapes_and_validation():
    scene = tiny_scene(8)
    params = init_model_params(CFG, seed=8)
    out = backbone_forward(scene, params, CFG)
    n = scene.n_points
    assert out.semantic_logits.shape == (n, CFG.num_classes)
    assert out.offsets.shape == (n, 3)
    assert out.mask_features.shape == (n, CFG.mask_dim)
    with pytest.raises(ShapeMismatchError):
        heads(Tensor(np.zeros((4, CFG.feat_dim + 1))), params, CFG)
    with pytest.raises(ShapeMismatchError):
        encode_points(manual_scene([[0, 0, 0]], np.zeros((1, 3))), params, CFG)


def test_gradient_through_encoder_and_heads():
    scene = tiny_scene(9)
    params = init_model_params(CFG, seed=9)
    rng = np.random.default_rng(10)
    jittered = {k: Tensor(v.values + rng.normal(0, 0.2, v.shape), requires_grad=True)
                for k, v in params.items()}

    for name in ("enc.l1.b", "head.sem.l2.b", "head.mask.l2.b", "tf0.bq"):
        def f(t):
            trial = dict(jittered)
            trial[name] = t
            out = backbone_forward(scene, trial, CFG)
            return tensor_sum(out.semantic_logits) + tensor_sum(out.offsets) + tensor_sum(out.mask_features)

        err = gradient_check(f, jittered[name], 1e-5)
        assert err <= 1e-4, name
