import math

import numpy as np
import pytest

from osplus.benchmark import make_benchmark
from osplus.blocks import (
    BlockConfigError,
    BlockGraph,
    QuantizedBlock,
    calibrate_block,
    count_ops,
    forward_fp,
    forward_quant,
    fuse_block,
    load_block,
    random_block,
    save_block,
)
from osplus.methods import run_method
from osplus.quantizer import activation_spec, weight_spec
from osplus.search import output_change
from osplus.tensor_core import DimensionError, gelu, layernorm, matmul, softmax_rows
from osplus.transform import LinearLayer, TransformVectors


def rand_tv(rng, n):
    return TransformVectors(rng.normal(scale=3, size=n), np.exp(rng.uniform(-1, 2.5, size=n)))


def max_rel(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300)


@pytest.mark.parametrize("kind", ["pre_ln_mha", "post_ln_ffn", "linear_chain"])
def test_zero_weights_return_residual(kind):
    rng = np.random.default_rng(0)
    b = random_block(kind, rng, width=8, heads=2)
    zero = {n: LinearLayer(np.zeros_like(l.W), np.zeros_like(l.b)) for n, l in b.layers.items()}
    b = BlockGraph(kind, b.gamma, b.beta, zero, head_dim=4)
    x = rng.normal(size=(5, 8))
    want = x if kind == "pre_ln_mha" else layernorm(x, b.gamma, b.beta)
    np.testing.assert_array_equal(forward_fp(b, x), want)


def test_single_token_mha_is_v_path_plus_residual():
    rng = np.random.default_rng(1)
    b = random_block("pre_ln_mha", rng, width=8, heads=2)
    x = rng.normal(size=(1, 8))
    a = layernorm(x, b.gamma, b.beta)
    v = b.layers["v"](a)
    np.testing.assert_allclose(forward_fp(b, x), b.layers["out"](v) + x, rtol=0, atol=1e-12)


def test_mha_matches_hand_composition():
    rng = np.random.default_rng(2)
    b = random_block("pre_ln_mha", rng, width=16, heads=4)
    x = rng.normal(size=(6, 16))
    a = layernorm(x, b.gamma, b.beta)
    q, k, v = (matmul(a, b.layers[n].W) + b.layers[n].b for n in "qkv")
    heads = [
        softmax_rows(matmul(q[:, h : h + 4], k[:, h : h + 4]), 1 / math.sqrt(4)) @ v[:, h : h + 4]
        for h in range(0, 16, 4)
    ]
    want = matmul(np.hstack(heads), b.layers["out"].W) + b.layers["out"].b + x
    np.testing.assert_allclose(forward_fp(b, x), want, rtol=0, atol=1e-12)


def test_ffn_matches_hand_composition():
    rng = np.random.default_rng(3)
    b = random_block("post_ln_ffn", rng, width=8)
    x = rng.normal(size=(4, 8))
    a = layernorm(x, b.gamma, b.beta)
    h = gelu(matmul(a, b.layers["up"].W) + b.layers["up"].b)
    want = matmul(h, b.layers["down"].W) + b.layers["down"].b + a
    np.testing.assert_allclose(forward_fp(b, x), want, rtol=0, atol=1e-12)


@pytest.mark.parametrize("kind", ["pre_ln_mha", "post_ln_ffn", "linear_chain"])
def test_identity_fusion_is_noop(kind):
    b = random_block(kind, np.random.default_rng(4), width=8, heads=2)
    assert fuse_block(b, TransformVectors.identity(8)) is b


@pytest.mark.parametrize("kind", ["pre_ln_mha", "post_ln_ffn"])
def test_fusion_equivalence(kind):
    rng = np.random.default_rng(5)
    b = random_block(kind, rng)
    fused = fuse_block(b, rand_tv(rng, b.width))
    worst = max(max_rel(forward_fp(fused, x), forward_fp(b, x)) for x in rng.normal(size=(200, 1, 64)) * 4)
    assert worst <= 1e-9


def test_double_fusion_composes():
    rng = np.random.default_rng(6)
    b = random_block("post_ln_ffn", rng, width=16)
    twice = fuse_block(fuse_block(b, rand_tv(rng, 16)), rand_tv(rng, 16))
    x = rng.normal(size=(10, 16))
    assert max_rel(forward_fp(twice, x), forward_fp(b, x)) <= 1e-9


def test_fusion_size_mismatch():
    b = random_block("linear_chain", np.random.default_rng(7), width=8)
    with pytest.raises(DimensionError):
        fuse_block(b, TransformVectors.identity(4))
    with pytest.raises(DimensionError):
        forward_fp(b, np.zeros((2, 4)))


def test_op_counts_before_and_after_fusion():
    rng = np.random.default_rng(8)
    mha = random_block("pre_ln_mha", rng, width=16, heads=4)
    assert count_ops(fuse_block(mha, rand_tv(rng, 16))) == count_ops(mha)
    ffn = random_block("post_ln_ffn", rng, width=16)
    before, after = count_ops(ffn), count_ops(fuse_block(ffn, rand_tv(rng, 16)))
    assert after["quant_nodes"] == before["quant_nodes"]
    assert (before["channel_affine"], after["channel_affine"]) == (0, 1)


@pytest.mark.parametrize("kind", ["pre_ln_mha", "post_ln_ffn", "linear_chain"])
def test_identity_specs_match_fp(kind):
    rng = np.random.default_rng(9)
    b = random_block(kind, rng, width=16, heads=4)
    x = rng.normal(size=(8, 16))
    qb = calibrate_block(b, x, None, None)
    assert np.array_equal(forward_quant(qb, x), forward_fp(b, x))


def test_missing_params_is_config_error():
    b = random_block("post_ln_ffn", np.random.default_rng(10), width=8)
    with pytest.raises(BlockConfigError):
        forward_quant(QuantizedBlock(b, activation_spec(8), weight_spec(8)), np.zeros((2, 8)))


def test_per_token_activations_are_dynamic():
    rng = np.random.default_rng(11)
    b = random_block("pre_ln_mha", rng, width=16, heads=4)
    x = rng.normal(size=(8, 16))
    qb = calibrate_block(b, x, activation_spec(8, "token"), weight_spec(8))
    assert qb.act_params == {}
    assert 0 < output_change(forward_quant(qb, x), forward_fp(b, x)) < 1


@pytest.mark.parametrize("kind", ["pre_ln_mha", "post_ln_ffn", "linear_chain"])
def test_more_bits_less_error(kind):
    rng = np.random.default_rng(12)
    b = random_block(kind, rng, width=32, heads=4)
    x = rng.normal(size=(32, 32))
    errs = []
    for bits in (8, 6, 4):
        qb = calibrate_block(b, x, activation_spec(bits), weight_spec(bits))
        errs.append(output_change(forward_quant(qb, x), forward_fp(b, x)))
    assert errs[0] <= errs[1] <= errs[2]


def test_osplus_beats_minmax_on_planted_ffn():
    bm = make_benchmark(20240001, "post_ln_ffn", residual=True)
    a, w = activation_spec(6), weight_spec(6)
    ours = run_method("osplus", bm.block, bm.x_calib, a, w)
    base = run_method("minmax", bm.block, bm.x_calib, a, w)
    assert ours.output_change_mse < base.output_change_mse


@pytest.mark.parametrize("kind", ["pre_ln_mha", "post_ln_ffn"])
def test_save_load_round_trip(tmp_path, kind):
    rng = np.random.default_rng(13)
    b = fuse_block(random_block(kind, rng, width=16, heads=4), rand_tv(rng, 16))
    save_block(b, tmp_path / "blk")
    back = load_block(tmp_path / "blk")
    x = rng.normal(size=(3, 16))
    assert back.kind == kind and np.array_equal(forward_fp(back, x), forward_fp(b, x))


def test_block_validation():
    rng = np.random.default_rng(14)
    b = random_block("pre_ln_mha", rng, width=8, heads=2)
    with pytest.raises(BlockConfigError):
        BlockGraph("post_ln_ffn", b.gamma, b.beta, b.layers)
    with pytest.raises(DimensionError):
        BlockGraph("pre_ln_mha", b.gamma, b.beta, b.layers, head_dim=3)
    with pytest.raises(BlockConfigError):
        BlockGraph("bogus", b.gamma, b.beta, b.layers)
