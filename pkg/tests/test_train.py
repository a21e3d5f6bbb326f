import numpy as np
import pytest

from pointinst3d.autodiff import Tensor
from pointinst3d.backbone import ModelConfig, init_model_params
from pointinst3d.clustering import ClusteringConfig
from pointinst3d.scenes import SceneConfig, generate_scene
from pointinst3d.train import (
    TrainConfig,
    TrainingDiverged,
    read_loss_curve,
    train,
    write_loss_curve,
)

MODEL = ModelConfig(in_features=7, num_classes=4, feat_dim=8, mask_dim=4, heads=2,
                    transformer_layers=1, token_cell=0.8, encoder_hidden=10,
                    head_hidden=8, gw_channels=4, gw_hidden=8, decoder_hidden=4,
                    grid_size=4)
CLUSTER = ClusteringConfig(radius=0.3, stuff_labels=frozenset({0}), min_report_size=1)


def scenes_for(seeds):
    cfg = lambda s: SceneConfig(num_instances=(2, 3), size_range=(0.2, 0.3), d_min=0.8,
                                extent=2.5, stuff_density=5.0, points_per_instance=(10, 18),
                                num_thing_classes=3, seed=s)
    return [generate_scene(cfg(s)) for s in seeds]


def test_zero_learning_rate_keeps_params():
    scenes = scenes_for([1])
    init = init_model_params(MODEL, 7)
    frozen = {k: v.values.copy() for k, v in init.items()}
    params, curve = train(scenes, MODEL, CLUSTER, TrainConfig(lr=0.0, steps=5, seed=7), params=init)
    for name, before in frozen.items():
        assert np.array_equal(params[name].values, before)
    totals = [bd.total for bd in curve]
    assert all(t == totals[0] for t in totals)


def test_same_seed_bit_identical_curves():
    scenes = scenes_for([1, 2])
    cfg = TrainConfig(lr=1e-3, steps=8, warmup_steps=2, seed=11)
    _, curve_a = train(scenes, MODEL, CLUSTER, cfg)
    _, curve_b = train(scenes, MODEL, CLUSTER, cfg)
    for a, b in zip(curve_a, curve_b):
        assert (a.seg, a.ctr, a.mask, a.dice) == (b.seg, b.ctr, b.mask, b.dice)


def test_two_scene_training_halves_loss():
    scenes = scenes_for([3, 4])
    cfg = TrainConfig(lr=3e-3, steps=200, warmup_steps=40, seed=7)
    params, curve = train(scenes, MODEL, CLUSTER, cfg)
    assert len(curve) == 200
    first, last = curve[0].total, curve[-1].total
    assert last < 0.5 * first, (first, last)
    # regression fixture from the first successful run of this configuration
    assert first == pytest.approx(2.1236636693452313, rel=1e-6)
    assert last == pytest.approx(0.48354229336388127, rel=1e-3)


def test_divergence_aborts_with_step():
    scenes = scenes_for([5])
    params = init_model_params(MODEL, 0)
    params["enc.l1.w"] = Tensor(np.full(params["enc.l1.w"].shape, np.nan), requires_grad=True)
    with pytest.raises(TrainingDiverged) as excinfo:
        train(scenes, MODEL, CLUSTER, TrainConfig(lr=1e-3, steps=3, seed=0), params=params)
    assert excinfo.value.step == 1


def test_warmup_validation():
    with pytest.raises(ValueError):
        TrainConfig(steps=5, warmup_steps=6)
    with pytest.raises(ValueError):
        TrainConfig(batch_scenes=0)


def test_loss_curve_round_trip(tmp_path):
    scenes = scenes_for([6])
    _, curve = train(scenes, MODEL, CLUSTER, TrainConfig(lr=1e-3, steps=4, seed=1))
    path = tmp_path / "curve.txt"
    write_loss_curve(path, curve)
    loaded = read_loss_curve(path)
    assert len(loaded) == len(curve)
    for a, b in zip(curve, loaded):
        assert (a.seg, a.ctr, a.mask, a.dice) == (b.seg, b.ctr, b.mask, b.dice)
    # second write is byte-identical
    path2 = tmp_path / "curve2.txt"
    write_loss_curve(path2, loaded)
    assert path.read_bytes() == path2.read_bytes()
