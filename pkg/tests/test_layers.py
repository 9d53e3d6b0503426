"""Composite layers: SE gating, residual blocks, transformer blocks, norms."""
import math

import numpy as np
import pytest

from protune import ops
from protune.autograd import Tensor
from protune.layers import (
    Conv2d,
    DepthwiseConv2d,
    FrozenBatchNorm,
    LayerNorm,
    Linear,
    ResidualBlock,
    SEModule,
    TransformerBlock,
    uniform_init,
)


def test_uniform_init_bounds_and_determinism():
    a = uniform_init(np.random.default_rng(5), (100, 100), fan_in=100, dtype=np.float32)
    b = uniform_init(np.random.default_rng(5), (100, 100), fan_in=100, dtype=np.float32)
    assert np.array_equal(a, b)
    assert np.abs(a).max() <= 1.0 / math.sqrt(100)
    wide = uniform_init(np.random.default_rng(5), (100,), 4, np.float32, gain=math.sqrt(6.0))
    assert np.abs(wide).max() <= math.sqrt(6.0) / 2.0


# -- SE ------------------------------------------------------------------------


def test_se_zero_weights_halves_input(rng):
    se = SEModule(8, 2, rng)
    for t in (se.fc1.weight, se.fc1.bias, se.fc2.weight, se.fc2.bias):
        t.data = np.zeros_like(t.data)
    x = Tensor(np.random.default_rng(1).standard_normal((2, 8, 4, 4)).astype(np.float32))
    y = se(x)
    np.testing.assert_allclose(y.data, 0.5 * x.data, rtol=1e-6)
    assert y.shape == (2, 8, 4, 4)


def test_se_hand_weights():
    se = SEModule(2, 2, np.random.default_rng(0))
    se.fc1.weight.data = np.array([[1.0, 1.0]], dtype=np.float32)
    se.fc1.bias.data = np.array([0.0], dtype=np.float32)
    se.fc2.weight.data = np.array([[2.0], [-1.0]], dtype=np.float32)
    se.fc2.bias.data = np.array([0.0, 0.5], dtype=np.float32)
    x = Tensor(np.array([3.0, -1.0], dtype=np.float32).reshape(1, 2, 1, 1))
    # GAP = [3, -1]; fc1 = relu(3 - 1) = 2; fc2 = [4, -1.5]
    s = 1.0 / (1.0 + np.exp([-4.0, 1.5]))
    want = np.array([3.0 * s[0], -1.0 * s[1]], dtype=np.float64).reshape(1, 2, 1, 1)
    np.testing.assert_allclose(se(x).data, want, rtol=1e-6)


def test_se_gate_is_strictly_inside_unit_interval(rng):
    se = SEModule(6, 16, rng)
    x = Tensor(np.random.default_rng(2).standard_normal((3, 6, 5, 5)).astype(np.float32) * 50)
    g = se.gate(x).data
    assert (g > 0.0).all() and (g < 1.0).all()


def test_se_rejects_nonpositive_reduction(rng):
    with pytest.raises(ValueError):
        SEModule(8, 0, rng)


# -- residual block --------------------------------------------------------------


def test_residual_zero_branch_passthrough(rng):
    blk = ResidualBlock(4, 4, rng, stride=1)
    for t in (blk.conv1.weight, blk.conv1.bias, blk.conv2.weight, blk.conv2.bias):
        t.data = np.zeros_like(t.data)
    assert not blk.has_proj
    x = Tensor(np.abs(np.random.default_rng(3).standard_normal((2, 4, 6, 6))).astype(np.float32))
    y = blk(x)
    np.testing.assert_allclose(y.data, x.data, rtol=1e-6)


def test_residual_stride_two_downsamples(rng):
    blk = ResidualBlock(4, 8, rng, stride=2)
    assert blk.has_proj
    y = blk(Tensor(np.zeros((1, 4, 8, 8), dtype=np.float32)))
    assert y.shape == (1, 8, 4, 4)


def test_residual_matches_unrolled_ops(rng):
    blk = ResidualBlock(3, 5, rng, stride=2)
    x = Tensor(np.random.default_rng(4).standard_normal((2, 3, 8, 8)).astype(np.float32))
    y = blk(x)
    h = ops.relu(blk.norm1(ops.conv2d(x, blk.conv1.weight, blk.conv1.bias, stride=2, padding=1)))
    h = blk.norm2(ops.conv2d(h, blk.conv2.weight, blk.conv2.bias, stride=1, padding=1))
    s = blk.proj_norm(ops.conv2d(x, blk.proj.weight, blk.proj.bias, stride=2, padding=0))
    want = ops.relu(ops.add(h, s))
    np.testing.assert_allclose(y.data, want.data, rtol=1e-6, atol=1e-6)


# -- transformer block ------------------------------------------------------------


def test_transformer_zero_value_path_is_identity(rng):
    blk = TransformerBlock(8, 2, rng)
    for t in (blk.proj.weight, blk.proj.bias, blk.fc2.weight, blk.fc2.bias):
        t.data = np.zeros_like(t.data)
    x = Tensor(np.random.default_rng(5).standard_normal((2, 5, 8)).astype(np.float32))
    np.testing.assert_allclose(blk(x).data, x.data, rtol=1e-6)


def test_transformer_attention_rows_sum_to_one(rng):
    blk = TransformerBlock(8, 2, rng)
    x = Tensor(np.random.default_rng(6).standard_normal((2, 6, 8)).astype(np.float32))
    probs = blk.attention_probs(x).data
    assert probs.shape == (2, 2, 6, 6)
    np.testing.assert_allclose(probs.sum(axis=-1), 1.0, atol=1e-6)


def test_transformer_hand_attention():
    """Single head, two tokens, D=2, with layer norm neutralized and qkv set
    by hand; compare against a scalar recomputation of softmax attention."""
    blk = TransformerBlock(2, 1, np.random.default_rng(0))
    # identity-like ln: gamma 1 beta 0 is the init, but ln still normalizes;
    # feed it tokens and reuse its exact output for the oracle instead
    x = Tensor(np.array([[[1.0, 2.0], [3.0, -1.0]]], dtype=np.float32))
    ln_out = blk.ln1(x).data[0]
    W = np.zeros((6, 2), dtype=np.float32)
    W[0:2] = np.array([[1.0, 0.0], [0.0, 1.0]])       # q = ln(x)
    W[2:4] = np.array([[0.0, 1.0], [1.0, 0.0]])       # k = swap(ln(x))
    W[4:6] = np.array([[2.0, 0.0], [0.0, 2.0]])       # v = 2 ln(x)
    blk.qkv.weight.data = W
    blk.qkv.bias.data = np.zeros(6, dtype=np.float32)
    probs = blk.attention_probs(x).data[0, 0]
    q = ln_out
    k = ln_out[:, ::-1]
    scores = (q @ k.T) / math.sqrt(2.0)
    e = np.exp(scores - scores.max(axis=1, keepdims=True))
    want = e / e.sum(axis=1, keepdims=True)
    np.testing.assert_allclose(probs, want, rtol=1e-5, atol=1e-6)


def test_transformer_rejects_indivisible_heads(rng):
    with pytest.raises(ValueError):
        TransformerBlock(7, 2, rng)


# -- norms -------------------------------------------------------------------------


def test_frozen_bn_same_row_same_output_across_batches(rng):
    bn = FrozenBatchNorm(3)
    row = np.random.default_rng(7).standard_normal((1, 3, 4, 4)).astype(np.float32)
    other = np.random.default_rng(8).standard_normal((5, 3, 4, 4)).astype(np.float32)
    alone = bn(Tensor(row)).data
    batched = bn(Tensor(np.concatenate([row, other]))).data
    assert np.array_equal(alone[0], batched[0])


def test_layer_norm_layer_params_registered():
    ln = LayerNorm(6)
    names = {n for n, _, _ in ln.named_params("x")}
    assert names == {"x.gamma", "x.beta"}


def test_param_registry_traversal(rng):
    blk = ResidualBlock(3, 5, rng, stride=2)
    names = [n for n, _, _ in blk.named_params("stage1")]
    assert "stage1.conv1.weight" in names
    assert "stage1.proj_norm.gamma" in names
    assert len(names) == len(set(names))


def test_buffers_never_require_grad(rng):
    bn = FrozenBatchNorm(4)
    for name, t, info in bn.named_params():
        if info.buffer:
            assert not t.requires_grad


def test_depthwise_layer_same_padding(rng):
    dw = DepthwiseConv2d(3, 5, rng)
    y = dw(Tensor(np.zeros((1, 3, 7, 7), dtype=np.float32)))
    assert y.shape == (1, 3, 7, 7)


def test_linear_conv_layer_shapes(rng):
    lin = Linear(5, 3, rng)
    assert lin.weight.shape == (3, 5)
    conv = Conv2d(2, 4, 3, rng, stride=1, padding=1)
    y = conv(Tensor(np.zeros((1, 2, 6, 6), dtype=np.float32)))
    assert y.shape == (1, 4, 6, 6)
