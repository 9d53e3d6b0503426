"""Prompt blocks: blending, token folding, insertion policies, param counts."""
import math

import numpy as np
import pytest

from protune import ops
from protune.autograd import Tensor
from protune.backbones import build_backbone, tiny_cnn_spec
from protune.prompt import (
    InsertionPolicy,
    PromptBlock,
    PromptBlockConfig,
    blend,
    count_prompt_params,
    grid_to_tokens,
    install_prompts,
    tokens_to_grid,
)

from conftest import micro_cnn_spec, micro_vit_spec


def freeze(model):
    for _name, tensor, info in model.named_entries():
        if not info.buffer:
            tensor.requires_grad = False
    return model


# ---------------------------------------------------------------------------
# blending


def test_blend_hand_values():
    x = Tensor(np.array([1.0, 2.0], dtype=np.float32))
    fx = Tensor(np.array([5.0, -5.0], dtype=np.float32))
    beta = Tensor(np.array(0.5, dtype=np.float32))
    out = blend(x, fx, beta)
    assert np.allclose(out.data, [3.5, -0.5])


def test_blend_zero_beta_is_bitwise_identity(rng):
    x = Tensor(rng.standard_normal((2, 3, 5, 5)).astype(np.float32))
    fx = Tensor(rng.standard_normal((2, 3, 5, 5)).astype(np.float32))
    beta = Tensor(np.array(0.0, dtype=np.float32))
    out = blend(x, fx, beta)
    assert out.data.tobytes() == x.data.tobytes()


def test_blend_shape_mismatch_rejected(rng):
    x = Tensor(rng.standard_normal((1, 4, 3, 3)).astype(np.float32))
    fx = Tensor(rng.standard_normal((1, 4, 3, 4)).astype(np.float32))
    with pytest.raises(ops.DimensionError):
        blend(x, fx, Tensor(np.array(1.0, dtype=np.float32)))


def test_blend_nonscalar_beta_rejected(rng):
    x = Tensor(rng.standard_normal((1, 2, 3, 3)).astype(np.float32))
    with pytest.raises(ops.DimensionError, match="scalar"):
        blend(x, x, Tensor(np.ones(2, dtype=np.float32)))


def test_blend_gradient_flows_to_beta(rng):
    x = Tensor(rng.standard_normal((1, 2, 3, 3)).astype(np.float32))
    fx = Tensor(rng.standard_normal((1, 2, 3, 3)).astype(np.float32))
    beta = Tensor(np.array(0.0, dtype=np.float32), requires_grad=True)
    ops.tsum(blend(x, fx, beta)).backward()
    # d/d beta of sum(x + beta*fx) = sum(fx), even at beta = 0
    assert np.isclose(beta.grad, fx.data.sum(), rtol=1e-5)


# ---------------------------------------------------------------------------
# token <-> grid folding


def test_tokens_to_grid_shape_and_order(rng):
    n, t, d = 2, 65, 6
    tokens = Tensor(rng.standard_normal((n, t, d)).astype(np.float32))
    grid, cls = tokens_to_grid(tokens)
    assert grid.shape == (n, d, 8, 8)
    assert cls.shape == (n, 1, d)
    assert np.array_equal(cls.data[:, 0, :], tokens.data[:, 0, :])
    # patch token k lands at row-major grid position (k // 8, k % 8)
    for k in (0, 7, 9, 63):
        assert np.array_equal(grid.data[:, :, k // 8, k % 8], tokens.data[:, k + 1, :])


def test_grid_tokens_roundtrip_lossless(rng):
    tokens = Tensor(rng.standard_normal((3, 17, 8)).astype(np.float32))
    grid, cls = tokens_to_grid(tokens)
    back = ops.concat([cls, grid_to_tokens(grid)], axis=1)
    assert back.data.tobytes() == tokens.data.tobytes()


def test_tokens_to_grid_without_cls(rng):
    tokens = Tensor(rng.standard_normal((1, 16, 4)).astype(np.float32))
    grid, cls = tokens_to_grid(tokens, has_cls=False)
    assert cls is None
    assert grid.shape == (1, 4, 4, 4)


def test_non_square_patch_count_rejected(rng):
    tokens = Tensor(rng.standard_normal((1, 7, 4)).astype(np.float32))  # 6 patches
    with pytest.raises(ops.DimensionError, match="perfect square"):
        tokens_to_grid(tokens)


def test_token_rank_errors(rng):
    with pytest.raises(ops.DimensionError):
        tokens_to_grid(Tensor(rng.standard_normal((4, 4)).astype(np.float32)))
    with pytest.raises(ops.DimensionError):
        grid_to_tokens(Tensor(rng.standard_normal((1, 4, 4)).astype(np.float32)))


# ---------------------------------------------------------------------------
# block behaviour


def test_class_token_bypasses_block(rng):
    cfg = PromptBlockConfig(channels=6, reduction=2, kernel=3, se_reduction=2, beta_init=1.0)
    block = PromptBlock(cfg, rng)
    tokens = Tensor(rng.standard_normal((2, 17, 6)).astype(np.float32))
    out = block.blend_tokens(tokens)
    assert out.shape == tokens.shape
    assert np.array_equal(out.data[:, 0, :], tokens.data[:, 0, :])
    assert not np.array_equal(out.data[:, 1:, :], tokens.data[:, 1:, :])


def test_zero_beta_block_is_identity_on_grid(rng):
    cfg = PromptBlockConfig(channels=4, reduction=2, kernel=3, se_reduction=2)
    block = PromptBlock(cfg, rng)
    x = Tensor(rng.standard_normal((2, 4, 6, 6)).astype(np.float32))
    assert block.blend_grid(x).data.tobytes() == x.data.tobytes()


def test_fixed_beta_excluded_from_grad(rng):
    cfg = PromptBlockConfig(channels=4, reduction=2, kernel=3, se_reduction=2,
                            beta_init=0.5, learnable_beta=False)
    block = PromptBlock(cfg, rng)
    assert not block.beta.requires_grad
    cfg2 = PromptBlockConfig(channels=4, reduction=2, kernel=3, se_reduction=2)
    assert PromptBlock(cfg2, rng).beta.requires_grad


def test_config_validation():
    with pytest.raises(ValueError):
        PromptBlockConfig(channels=0)
    with pytest.raises(ValueError):
        PromptBlockConfig(channels=8, reduction=3)
    with pytest.raises(ValueError):
        PromptBlockConfig(channels=8, kernel=4)
    with pytest.raises(ValueError):
        PromptBlockConfig(channels=8, se_reduction=0)


def test_bottleneck_floor():
    assert PromptBlockConfig(channels=2, reduction=4).bottleneck == 1
    assert PromptBlockConfig(channels=64, reduction=4).bottleneck == 16


# ---------------------------------------------------------------------------
# parameter counting


def test_count_hand_oracle():
    # channels 4, reduction 2, kernel 3, se_reduction 2:
    # down 4*2+2=10, dw 9*2+2=20, up 2*4+4=12, se 2*4*2+2+4=22, beta 1 -> 65
    cfg = PromptBlockConfig(channels=4, reduction=2, kernel=3, se_reduction=2)
    assert count_prompt_params(cfg) == 65


def test_count_matches_enumeration(rng):
    picks = np.random.default_rng(7)
    for _ in range(25):
        cfg = PromptBlockConfig(
            channels=int(picks.integers(1, 96)),
            reduction=int(picks.choice([1, 2, 4])),
            kernel=int(picks.choice([3, 5, 7])),
            se_reduction=int(picks.integers(1, 20)),
        )
        block = PromptBlock(cfg, rng)
        enumerated = sum(t.size for _n, t, _i in block.named_params())
        assert enumerated == count_prompt_params(cfg), cfg


def test_count_scales_quadratically_with_width():
    cfg64 = PromptBlockConfig(channels=64)
    cfg128 = PromptBlockConfig(channels=128)
    ratio = count_prompt_params(cfg128) / count_prompt_params(cfg64)
    assert 3.0 < ratio < 4.5


def test_kernel_term_is_additive():
    base = PromptBlockConfig(channels=32, reduction=4, kernel=3)
    bigger = PromptBlockConfig(channels=32, reduction=4, kernel=5)
    assert count_prompt_params(bigger) - count_prompt_params(base) == (25 - 9) * 8


# ---------------------------------------------------------------------------
# insertion policies


def test_per_stage_policy():
    p = InsertionPolicy.per_stage(4)
    assert p.points == (1, 2, 3, 4)
    assert p.total_blocks == 4


def test_positional_policies_on_twelve_layers():
    assert InsertionPolicy.from_name("F1", 12).points == (1,)
    assert InsertionPolicy.from_name("L1", 12).points == (12,)
    f5 = InsertionPolicy.from_name("F5", 12)
    assert f5.points == (1,) and f5.per_point == 5
    l5 = InsertionPolicy.from_name("L5", 12)
    assert l5.points == (12,) and l5.per_point == 5
    u5 = InsertionPolicy.from_name("U5", 12)
    assert u5.points == (0, 3, 6, 9, 12)
    assert u5.total_blocks == 5


def test_u5_needs_divisible_depth():
    with pytest.raises(ValueError, match="divisible by 4"):
        InsertionPolicy.from_name("U5", 10)


def test_unknown_policy_name():
    with pytest.raises(ValueError, match="unknown insertion policy"):
        InsertionPolicy.from_name("M3", 12)


def test_policy_validation():
    with pytest.raises(ValueError, match="duplicate"):
        InsertionPolicy.at_points((1, 1))
    with pytest.raises(ValueError):
        InsertionPolicy.at_points((1,), per_point=0)


# ---------------------------------------------------------------------------
# installation


def test_install_binds_widths_per_point(rng):
    model = freeze(build_backbone(micro_cnn_spec(), seed=0))
    pm = install_prompts(model, InsertionPolicy.per_stage(2),
                         PromptBlockConfig(channels=1, reduction=2, se_reduction=2),
                         num_classes=4, seed=0)
    assert pm.prompts[1][0].cfg.channels == 4
    assert pm.prompts[2][0].cfg.channels == 8


def test_install_rejects_trainable_backbone():
    model = build_backbone(micro_cnn_spec(), seed=0)  # fresh, still trainable
    with pytest.raises(ValueError, match="trainable backbone"):
        install_prompts(model, InsertionPolicy.per_stage(2),
                        PromptBlockConfig(channels=1), num_classes=4, seed=0)


def test_install_rejects_out_of_range_point():
    model = freeze(build_backbone(micro_cnn_spec(), seed=0))
    with pytest.raises(ValueError, match="outside"):
        install_prompts(model, InsertionPolicy.at_points((5,)),
                        PromptBlockConfig(channels=1), num_classes=4, seed=0)


def test_installed_names_and_sharing(rng):
    model = freeze(build_backbone(micro_cnn_spec(), seed=0))
    pm = install_prompts(model, InsertionPolicy.per_stage(2),
                         PromptBlockConfig(channels=1, reduction=2, se_reduction=2),
                         num_classes=4, seed=0)
    names = [n for n, _t, _i in pm.named_entries()]
    assert len(names) == len(set(names))
    assert any(n.startswith("prompt1.b0.") for n in names)
    assert any(n.startswith("prompt2.b0.") for n in names)
    # backbone tensors are shared objects, not copies
    assert pm.registry()["stem.conv.weight"][0] is model.registry()["stem.conv.weight"][0]


def test_stacked_blocks_have_independent_parameters(rng):
    model = freeze(build_backbone(micro_vit_spec(), seed=0))
    pm = install_prompts(model, InsertionPolicy.at_points((1,), per_point=3),
                         PromptBlockConfig(channels=1, reduction=2, se_reduction=2),
                         num_classes=4, seed=0)
    blocks = pm.prompts[1]
    assert len(blocks) == 3
    w = [b.conv_down.weight.data.tobytes() for b in blocks]
    assert len(set(w)) == 3


def test_prompt_param_count_sums_blocks():
    model = freeze(build_backbone(micro_cnn_spec(), seed=0))
    cfg = PromptBlockConfig(channels=1, reduction=2, se_reduction=2)
    pm = install_prompts(model, InsertionPolicy.per_stage(2), cfg, num_classes=4, seed=0)
    expect = count_prompt_params(cfg.at_channels(4)) + count_prompt_params(cfg.at_channels(8))
    assert pm.prompt_param_count() == expect


def test_desk_cnn_prompt_total():
    model = freeze(build_backbone(tiny_cnn_spec(), seed=0))
    pm = install_prompts(model, InsertionPolicy.per_stage(4), PromptBlockConfig(channels=1),
                         num_classes=10, seed=0)
    assert pm.prompt_param_count() == 15_719


def test_zero_beta_install_collapses_to_backbone(rng):
    """With all betas at zero the prompted forward equals the plain forward
    of the same backbone wearing the same fresh head."""
    model = freeze(build_backbone(micro_cnn_spec(), seed=1))
    pm = install_prompts(model, InsertionPolicy.per_stage(2),
                         PromptBlockConfig(channels=1, reduction=2, se_reduction=2),
                         num_classes=4, seed=9)
    model.head = pm.head
    x = Tensor(rng.standard_normal((4, 3, 16, 16)).astype(np.float32))
    assert pm.logits(x).data.tobytes() == model.logits(x).data.tobytes()
