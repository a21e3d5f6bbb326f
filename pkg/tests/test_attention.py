import numpy as np
import pytest

from pointinst3d.attention import AttentionConfig, attention_weights, init_mhsa_params, mhsa_forward
from pointinst3d.autodiff import ShapeMismatchError, Tensor, gradient_check, mul, tensor_sum


def make_block(seed, dim=8, heads=2):
    cfg = AttentionConfig(dim=dim, heads=heads)
    params = init_mhsa_params(np.random.default_rng(seed), cfg, "blk.")
    return cfg, params


def test_heads_must_divide_dim():
    with pytest.raises(ShapeMismatchError, match="divisible"):
        AttentionConfig(dim=7, heads=2)


def test_single_token_attention_weight_is_one():
    cfg, params = make_block(0, dim=6, heads=2)
    tokens = Tensor(np.random.default_rng(1).normal(size=(1, 6)))
    rel = Tensor(np.zeros((1, 1, 3)))
    for w in attention_weights(tokens, params, rel, cfg, "blk."):
        assert w.shape == (1, 1)
        assert w[0, 0] == 1.0


def test_single_token_output_formula():
    # With one token the attended value is exactly the value projection, so
    # the block is x1 = x + (x Wv + bv) Wo + bo; y = x1 + ffn(x1).
    cfg, params = make_block(2, dim=6, heads=2)
    x = np.random.default_rng(3).normal(size=(1, 6))
    rel = Tensor(np.zeros((1, 1, 3)))
    out = mhsa_forward(Tensor(x), params, rel, cfg, "blk.").values

    p = {k.removeprefix("blk."): v.values for k, v in params.items()}
    v = x @ p["wv"] + p["bv"]
    x1 = x + v @ p["wo"] + p["bo"]
    h = np.maximum(x1 @ p["ffn_w1"] + p["ffn_b1"], 0.0)
    expected = x1 + h @ p["ffn_w2"] + p["ffn_b2"]
    assert np.allclose(out, expected, atol=1e-14)


def test_permutation_equivariance():
    cfg, params = make_block(4, dim=8, heads=2)
    rng = np.random.default_rng(5)
    tokens = rng.normal(size=(6, 8))
    centers = rng.normal(size=(6, 3))
    rel = centers[:, None, :] - centers[None, :, :]
    out = mhsa_forward(Tensor(tokens), params, Tensor(rel), cfg, "blk.").values

    perm = rng.permutation(6)
    rel_p = rel[perm][:, perm]
    out_p = mhsa_forward(Tensor(tokens[perm]), params, Tensor(rel_p), cfg, "blk.").values
    assert np.allclose(out_p, out[perm], atol=1e-12)


def test_attention_rows_are_stochastic():
    cfg, params = make_block(6, dim=8, heads=2)
    rng = np.random.default_rng(7)
    tokens = Tensor(rng.normal(size=(5, 8)))
    rel = Tensor(rng.normal(size=(5, 5, 3)))
    for w in attention_weights(tokens, params, rel, cfg, "blk."):
        assert np.all(np.abs(w.sum(axis=1) - 1.0) <= 1e-12)
        assert np.all(w >= 0.0)


def test_gradient_through_block():
    cfg, params = make_block(8, dim=8, heads=2)
    rng = np.random.default_rng(9)
    rel = Tensor(rng.normal(size=(5, 5, 3)))
    weight = Tensor(rng.normal(size=(5, 8)))

    def f(tokens):
        return tensor_sum(mul(mhsa_forward(tokens, params, rel, cfg, "blk."), weight))

    err = gradient_check(f, Tensor(rng.normal(size=(5, 8))), 1e-5)
    assert err <= 1e-4


def test_rel_pos_shape_validated():
    cfg, params = make_block(10, dim=6, heads=2)
    with pytest.raises(ShapeMismatchError, match="rel_pos"):
        mhsa_forward(Tensor(np.zeros((3, 6))), params, Tensor(np.zeros((2, 2, 3))), cfg, "blk.")
