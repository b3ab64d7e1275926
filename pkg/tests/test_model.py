import math

import numpy as np
import pytest
import torch
from scipy.special import erf

from vicount.density import gt_bundle
from vicount.annotations import derive_flow
from vicount.errors import ConfigError, ShapeError
from vicount.model import (
    CrossFrameBlock,
    DensityDecoder,
    ModelConfig,
    MultiHeadAttention,
    MultiScaleCrossFrame,
    ShallowCrossFrame,
    VICModel,
    build_model,
    count_parameters,
    load_checkpoint,
    save_checkpoint,
    to_map,
    to_tokens,
)

from conftest import gradient_check, random_frame, tiny_model_config


# ---------------------------------------------------------------- references

def np_layer_norm(x, weight, bias, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * weight + bias


def np_attention(q_tokens, kv_tokens, wq, wk, wv, n_heads):
    """Float64 hand evaluation: project, per-head softmax(QK^T/sqrt(D))V,
    concatenate heads. torch Linear computes x @ W.T."""
    q = q_tokens @ wq.T
    k = kv_tokens @ wk.T
    v = kv_tokens @ wv.T
    d = q.shape[-1] // n_heads
    heads = []
    for h in range(n_heads):
        qs, ks, vs = (m[:, h * d:(h + 1) * d] for m in (q, k, v))
        scores = qs @ ks.T / math.sqrt(d)
        e = np.exp(scores - scores.max(-1, keepdims=True))
        p = e / e.sum(-1, keepdims=True)
        heads.append(p @ vs)
    return np.concatenate(heads, axis=-1)


def np_gelu(x):
    return x * 0.5 * (1.0 + erf(x / math.sqrt(2.0)))


def np_block(x, kv, block: CrossFrameBlock, n_heads):
    w = {k: v.detach().numpy() for k, v in block.state_dict().items()}
    n1 = np_layer_norm(x, w["norm_self.weight"], w["norm_self.bias"])
    sa = np_attention(n1, n1, w["self_attn.query_proj.weight"],
                      w["self_attn.key_proj.weight"],
                      w["self_attn.value_proj.weight"], n_heads)
    x = x + sa @ w["self_out.weight"].T + w["self_out.bias"]
    n2 = np_layer_norm(x, w["norm_cross.weight"], w["norm_cross.bias"])
    ca = np_attention(n2, kv, w["cross_attn.query_proj.weight"],
                      w["cross_attn.key_proj.weight"],
                      w["cross_attn.value_proj.weight"], n_heads)
    ca = ca @ w["cross_out.weight"].T + w["cross_out.bias"]
    x = x + ca if block.mca_residual else ca
    n3 = np_layer_norm(x, w["norm_mlp.weight"], w["norm_mlp.bias"])
    h = np_gelu(n3 @ w["mlp.fc1.weight"].T + w["mlp.fc1.bias"])
    return x + h @ w["mlp.fc2.weight"].T + w["mlp.fc2.bias"]


def zero_block_projections(block: CrossFrameBlock):
    with torch.no_grad():
        for layer in (block.self_out, block.cross_out, block.mlp.fc2):
            layer.weight.zero_()
            layer.bias.zero_()


# ------------------------------------------------------------------- config

class TestModelConfig:
    def test_head_divisibility(self):
        with pytest.raises(ConfigError):
            ModelConfig(channels=30, n_heads=4)

    def test_bad_variant(self):
        with pytest.raises(ConfigError):
            ModelConfig(variant="magic")

    def test_bad_positional_encoding(self):
        with pytest.raises(ConfigError):
            ModelConfig(positional_encoding="learned")

    def test_from_dict_rejects_unknown_keys(self):
        with pytest.raises(ConfigError):
            ModelConfig.from_dict({"channels": 32, "depth": 9})

    def test_head_dim(self):
        assert ModelConfig(channels=32, n_heads=4).head_dim == 8


# ------------------------------------------------------------------ pyramid

class TestExtractPyramid:
    def test_level_shapes(self):
        torch.manual_seed(0)
        model = VICModel(ModelConfig())  # n_levels=3, channels=32
        levels = model.extract_pyramid(torch.rand(1, 3, 64, 64))
        assert [tuple(l.shape) for l in levels] == [
            (1, 32, 16, 16), (1, 32, 8, 8), (1, 32, 4, 4)]

    def test_determinism_and_weight_sharing(self):
        model = build_model(tiny_model_config(), seed=0)
        image = torch.rand(1, 3, 32, 32)
        a = model.extract_pyramid(image)
        b = model.extract_pyramid(image.clone())
        assert all(torch.equal(x, y) for x, y in zip(a, b))

    def test_irregular_input_padded(self):
        torch.manual_seed(0)
        model = VICModel(ModelConfig())
        levels = model.extract_pyramid(torch.rand(1, 3, 63, 64))
        assert [tuple(l.shape) for l in levels] == [
            (1, 32, 16, 16), (1, 32, 8, 8), (1, 32, 4, 4)]

    def test_too_small_input_names_minimum(self):
        model = build_model(tiny_model_config(), seed=0)  # pad multiple 8
        with pytest.raises(ShapeError, match="8x8"):
            model.extract_pyramid(torch.rand(1, 3, 4, 20))


# ---------------------------------------------------------------- attention

class TestMultiHeadAttention:
    def test_single_kv_token_identity_projections(self):
        attn = MultiHeadAttention(4, 1)
        with torch.no_grad():
            for proj in (attn.query_proj, attn.key_proj, attn.value_proj):
                proj.weight.copy_(torch.eye(4))
        q = torch.rand(1, 1, 4)
        kv = torch.rand(1, 1, 4)
        out = attn(q, kv)
        assert torch.allclose(out, kv, atol=1e-7)

    def test_identical_kv_tokens_ignore_query(self):
        torch.manual_seed(3)
        attn = MultiHeadAttention(8, 2)
        kv = torch.rand(1, 1, 8).repeat(1, 5, 1)
        out1 = attn(torch.rand(1, 3, 8), kv)
        out2 = attn(torch.rand(1, 3, 8), kv)
        expected = attn.value_proj(kv[:, :1])
        assert torch.allclose(out1, out2, atol=1e-6)
        assert torch.allclose(out1, expected.expand(1, 3, 8), atol=1e-6)

    def test_matches_hand_evaluation_float64(self, rng):
        torch.manual_seed(7)
        attn = MultiHeadAttention(8, 2).double()
        q = torch.from_numpy(rng.normal(size=(1, 2, 8)))
        kv = torch.from_numpy(rng.normal(size=(1, 2, 8)))
        out = attn(q, kv).detach().numpy()[0]
        ref = np_attention(
            q.numpy()[0], kv.numpy()[0],
            attn.query_proj.weight.detach().numpy(),
            attn.key_proj.weight.detach().numpy(),
            attn.value_proj.weight.detach().numpy(), 2)
        assert np.max(np.abs(out - ref)) < 1e-9

    def test_rows_sum_to_one(self, rng):
        torch.manual_seed(0)
        attn = MultiHeadAttention(16, 4)
        _, weights = attn(torch.rand(2, 6, 16), torch.rand(2, 9, 16),
                          return_weights=True)
        sums = weights.sum(dim=-1)
        assert torch.max(torch.abs(sums - 1.0)) < 1e-6

    def test_kv_joint_permutation_invariance(self):
        torch.manual_seed(1)
        attn = MultiHeadAttention(8, 2)
        q = torch.rand(1, 5, 8)
        kv = torch.rand(1, 7, 8)
        perm = torch.randperm(7)
        out = attn(q, kv)
        out_perm = attn(q, kv[:, perm])
        assert torch.max(torch.abs(out - out_perm)) < 1e-6

    def test_query_permutation_permutes_rows(self):
        torch.manual_seed(2)
        attn = MultiHeadAttention(8, 2)
        q = torch.rand(1, 5, 8)
        kv = torch.rand(1, 4, 8)
        perm = torch.randperm(5)
        assert torch.allclose(attn(q[:, perm], kv), attn(q, kv)[:, perm], atol=1e-6)

    def test_indivisible_width_rejected(self):
        with pytest.raises(ConfigError):
            MultiHeadAttention(10, 4)


class TestCrossFrameBlock:
    def test_zero_projections_give_identity(self):
        torch.manual_seed(0)
        block = CrossFrameBlock(8, 2, mca_residual=True)
        zero_block_projections(block)
        x = torch.rand(1, 6, 8)
        kv = torch.rand(1, 6, 8)
        assert torch.allclose(block(x, kv), x, atol=1e-7)

    def test_strict_mode_replaces_instead_of_adding(self):
        torch.manual_seed(0)
        block = CrossFrameBlock(8, 2, mca_residual=False)
        zero_block_projections(block)
        x = torch.rand(1, 6, 8)
        kv = torch.rand(1, 6, 8)
        # with zero cross_out the non-residual path collapses x'' to zero,
        # so only the (zeroed) MLP residual remains: output is zero
        assert torch.max(torch.abs(block(x, kv))) < 1e-7

    @pytest.mark.parametrize("residual", [True, False])
    def test_matches_reference_composition(self, rng, residual):
        torch.manual_seed(5)
        block = CrossFrameBlock(8, 2, mca_residual=residual).double()
        x = rng.normal(size=(4, 8))
        kv = rng.normal(size=(4, 8))
        out = block(torch.from_numpy(x[None]), torch.from_numpy(kv[None]))
        ref = np_block(x, kv, block, n_heads=2)
        assert np.max(np.abs(out.detach().numpy()[0] - ref)) < 1e-9


class TestMultiScaleCrossFrame:
    def test_single_unit_single_block_is_one_block(self):
        cfg = tiny_model_config(n_levels=1, channels=8)
        torch.manual_seed(0)
        module = MultiScaleCrossFrame(cfg)
        feat_q = torch.rand(1, 8, 4, 4)
        feat_kv = torch.rand(1, 8, 4, 4)
        out = module([feat_q], [feat_kv])
        block = module.units[0].blocks[0]
        ref = to_map(block(to_tokens(feat_q), to_tokens(feat_kv)), 4, 4)
        assert torch.equal(out, ref)

    def test_identical_pyramids_symmetric(self):
        cfg = tiny_model_config()
        torch.manual_seed(0)
        module = MultiScaleCrossFrame(cfg)
        pyr = [torch.rand(1, 8, 8, 8), torch.rand(1, 8, 4, 4)]
        assert torch.equal(module(pyr, pyr), module(pyr, pyr))

    def test_two_unit_reference_composition(self):
        cfg = tiny_model_config()  # n_levels=2, n_blocks=1
        torch.manual_seed(4)
        module = MultiScaleCrossFrame(cfg)
        pyr_q = [torch.rand(1, 8, 8, 8), torch.rand(1, 8, 4, 4)]
        pyr_kv = [torch.rand(1, 8, 8, 8), torch.rand(1, 8, 4, 4)]

        t1 = module.units[0](to_tokens(pyr_q[0]), to_tokens(pyr_kv[0]))
        m1 = to_map(t1, 8, 8)
        resized = torch.nn.functional.interpolate(
            m1, size=(4, 4), mode="bilinear", align_corners=False)
        fused = module.fuse[0](torch.cat([resized, pyr_q[1]], dim=1))
        t2 = module.units[1](to_tokens(fused), to_tokens(pyr_kv[1]))
        ref = to_map(t2, 4, 4)

        assert torch.equal(module(pyr_q, pyr_kv), ref)

    def test_level_count_mismatch(self):
        cfg = tiny_model_config()
        module = MultiScaleCrossFrame(cfg)
        with pytest.raises(ConfigError):
            module([torch.rand(1, 8, 8, 8)], [torch.rand(1, 8, 8, 8)])


class TestShallowCrossFrame:
    def test_symmetric_on_identical_features(self):
        cfg = tiny_model_config(variant="shallow")
        torch.manual_seed(0)
        module = ShallowCrossFrame(cfg)
        feat = torch.rand(1, 8, 4, 4)
        assert torch.equal(module(feat, feat.clone()), module(feat, feat))

    def test_single_block_depth_equals_block(self):
        cfg = tiny_model_config(n_levels=1, n_blocks=1, variant="shallow")
        torch.manual_seed(0)
        module = ShallowCrossFrame(cfg)
        assert len(module.stack.blocks) == 1
        q, kv = torch.rand(1, 8, 4, 4), torch.rand(1, 8, 4, 4)
        ref = to_map(module.stack.blocks[0](to_tokens(q), to_tokens(kv)), 4, 4)
        assert torch.equal(module(q, kv), ref)

    def test_parameter_count_within_5_percent_of_multiscale(self):
        cfg = ModelConfig()  # default desk-scale build
        deep = count_parameters(MultiScaleCrossFrame(cfg))
        shallow = count_parameters(ShallowCrossFrame(cfg))
        assert abs(deep - shallow) / deep <= 0.05


# ----------------------------------------------------------------- decoders

class TestDensityDecoder:
    def test_shape_contract(self):
        torch.manual_seed(0)
        decoder = DensityDecoder(channels=32, n_stages=4)
        out = decoder(torch.rand(1, 32, 4, 4))
        assert tuple(out.shape) == (1, 1, 64, 64)

    def test_zero_feature_zero_bias_gives_zero_map(self):
        decoder = DensityDecoder(channels=16, n_stages=3)
        with torch.no_grad():
            for module in decoder.modules():
                if isinstance(module, torch.nn.Conv2d) and module.bias is not None:
                    module.bias.zero_()
        out = decoder(torch.zeros(1, 16, 4, 4))
        assert torch.count_nonzero(out) == 0

    def test_nonnegative_output(self):
        torch.manual_seed(1)
        decoder = DensityDecoder(channels=16, n_stages=3)
        with torch.no_grad():
            out = decoder(torch.randn(2, 16, 4, 4))
        assert float(out.min()) >= 0.0

    def test_global_and_shared_decoders_match_shapes_not_weights(self):
        model = build_model(tiny_model_config(), seed=0)
        shapes_g = [tuple(p.shape) for p in model.global_decoder.parameters()]
        shapes_s = [tuple(p.shape) for p in model.shared_decoder.parameters()]
        assert shapes_g == shapes_s
        same = all(
            torch.equal(a, b) for a, b in zip(
                model.global_decoder.parameters(), model.shared_decoder.parameters())
        )
        assert not same


# ------------------------------------------------------------------ forward

class TestForward:
    def test_identical_frames_mirror_outputs(self):
        model = build_model(tiny_model_config(), seed=0)
        image = torch.rand(1, 3, 32, 48)
        out = model(image, image.clone())
        assert torch.equal(out.global_a, out.global_b)
        assert torch.equal(out.shared_a, out.shared_b)
        assert torch.equal(out.outflow_a, out.inflow_b)

    def test_pair_swap_symmetry(self):
        model = build_model(tiny_model_config(), seed=0)
        a, b = torch.rand(1, 3, 32, 32), torch.rand(1, 3, 32, 32)
        fwd, rev = model(a, b), model(b, a)
        for x, y in [(fwd.global_a, rev.global_b), (fwd.global_b, rev.global_a),
                     (fwd.shared_a, rev.shared_b), (fwd.shared_b, rev.shared_a),
                     (fwd.outflow_a, rev.inflow_b), (fwd.inflow_b, rev.outflow_a)]:
            assert torch.max(torch.abs(x - y)) <= 1e-5

    def test_output_shapes_and_nonnegativity(self):
        model = build_model(tiny_model_config(), seed=0)
        out = model(torch.rand(1, 3, 64, 64), torch.rand(1, 3, 64, 64))
        for t in (out.global_a, out.global_b, out.shared_a, out.shared_b,
                  out.outflow_a, out.inflow_b):
            assert tuple(t.shape) == (1, 1, 64, 64)
            assert float(t.min()) >= 0.0

    def test_irregular_size_cropped_back(self):
        model = build_model(tiny_model_config(), seed=0)
        out = model(torch.rand(1, 3, 63, 97), torch.rand(1, 3, 63, 97))
        assert tuple(out.inflow_b.shape) == (1, 1, 63, 97)

    def test_shape_mismatch_rejected(self):
        model = build_model(tiny_model_config(), seed=0)
        with pytest.raises(ShapeError):
            model(torch.rand(1, 3, 32, 32), torch.rand(1, 3, 32, 40))

    def test_direct_variant_omits_shared_maps(self):
        model = build_model(tiny_model_config(variant="direct"), seed=0)
        out = model(torch.rand(1, 3, 32, 32), torch.rand(1, 3, 32, 32))
        assert out.shared_a is None and out.shared_b is None
        assert tuple(out.outflow_a.shape) == (1, 1, 32, 32)

    def test_shallow_variant_runs(self):
        model = build_model(tiny_model_config(variant="shallow"), seed=0)
        out = model(torch.rand(1, 3, 32, 32), torch.rand(1, 3, 32, 32))
        assert tuple(out.shared_a.shape) == (1, 1, 32, 32)

    def test_conditional_positional_encoding_runs(self):
        model = build_model(
            tiny_model_config(positional_encoding="conditional"), seed=0)
        out = model(torch.rand(1, 3, 32, 32), torch.rand(1, 3, 32, 32))
        assert tuple(out.inflow_b.shape) == (1, 1, 32, 32)


def test_gradient_small_slice(rng):
    torch.manual_seed(11)
    model = build_model(tiny_model_config(), seed=11)
    frame_a = random_frame(rng, [1, 2, 3, 4], width=32, height=32)
    frame_b = random_frame(rng, [3, 4, 5], index=1, width=32, height=32)
    gt = gt_bundle(derive_flow(frame_a, frame_b), frame_a, frame_b)
    images_a = torch.rand(1, 3, 32, 32, dtype=torch.float64)
    images_b = torch.rand(1, 3, 32, 32, dtype=torch.float64)
    n, worst = gradient_check(model, images_a, images_b, gt, n_coords=10)
    assert n >= 10 and worst < 1e-4


# ----------------------------------------------------------------- ckpt I/O

class TestCheckpoint:
    def test_roundtrip_preserves_outputs(self, tmp_path):
        model = build_model(tiny_model_config(variant="direct"), seed=0)
        save_checkpoint(model, tmp_path / "ckpt")
        loaded = load_checkpoint(tmp_path / "ckpt")
        assert loaded.config == model.config
        a, b = torch.rand(1, 3, 32, 32), torch.rand(1, 3, 32, 32)
        with torch.no_grad():
            out1, out2 = model(a, b), loaded(a, b)
        assert torch.equal(out1.inflow_b, out2.inflow_b)

    def test_missing_checkpoint(self, tmp_path):
        from vicount.errors import DataError
        with pytest.raises(DataError):
            load_checkpoint(tmp_path / "nope")
