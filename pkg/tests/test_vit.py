"""Mini-ViT model: embedding layout, attention math, forward contracts,
parameter accounting, end-to-end gradients, and the checkpoint format."""

import struct

import numpy as np
import pytest

from vitbench import autodiff as ad
from vitbench.autodiff import Tensor, grad_check
from vitbench.errors import (
    CheckpointConfigError,
    CheckpointError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    ConfigError,
    ContractError,
    NumericError,
    ShapeError,
)
from vitbench.vit import (
    CHECKPOINT_MAGIC,
    BlockParams,
    VitConfig,
    VitParams,
    encoder_block,
    init_params,
    load_params,
    mhsa,
    param_count,
    patch_embed,
    patchify,
    predict,
    save_params,
    vit_forward,
    vit_forward_features,
)


def zero_block(d, md):
    def z(*shape):
        return Tensor(np.zeros(shape), requires_grad=True)

    return BlockParams(
        ln1_gamma=Tensor(np.ones(d)), ln1_beta=z(d),
        wq=z(d, d), wk=z(d, d), wv=z(d, d), wo=z(d, d),
        ln2_gamma=Tensor(np.ones(d)), ln2_beta=z(d),
        mlp_w1=z(md, d), mlp_b1=z(md), mlp_w2=z(d, md), mlp_b2=z(d),
    )


class TestConfig:
    def test_validation(self):
        with pytest.raises(ConfigError):
            VitConfig(image_size=30, patch_size=8)
        with pytest.raises(ConfigError):
            VitConfig(embed_dim=10, num_heads=4)
        with pytest.raises(ConfigError):
            VitConfig(num_classes=3)
        with pytest.raises(ConfigError):
            VitConfig(dropout_rate=1.0)

    def test_derived_quantities(self):
        cfg = VitConfig(image_size=32, patch_size=8, embed_dim=16, mlp_ratio=2.0)
        assert cfg.grid_size == 4
        assert cfg.num_patches == 16
        assert cfg.patch_dim == 192
        assert cfg.mlp_hidden == 32


class TestParamCount:
    @pytest.mark.parametrize("kwargs", [
        dict(image_size=32, patch_size=8, embed_dim=16, depth=2, num_heads=2, mlp_ratio=2.0),
        dict(image_size=16, patch_size=4, embed_dim=8, depth=1, num_heads=1, mlp_ratio=4.0),
        dict(image_size=24, patch_size=8, embed_dim=12, depth=3, num_heads=3, mlp_ratio=1.5),
    ])
    def test_formula_matches_actual_tensor_sizes(self, kwargs):
        cfg = VitConfig(**kwargs)
        params = init_params(cfg, seed=0)
        actual = sum(t.data.size for _, t in params.named_tensors())
        assert param_count(cfg) == actual

    def test_hand_computed_example(self):
        # d=8, P=4 (patch_dim 48), 16 patches, depth 1, mlp_hidden 16:
        # patch 8*48+8=392; cls+pos 8+17*8=144;
        # block 4*64+32 + (8*16+16) + (16*8+8) = 288+144+136 = 568;
        # head 16+18 = 34  -> total 1138
        cfg = VitConfig(image_size=16, patch_size=4, embed_dim=8, depth=1,
                        num_heads=2, mlp_ratio=2.0)
        assert param_count(cfg) == 1138


class TestInit:
    def test_deterministic_in_seed(self):
        cfg = VitConfig(image_size=16, patch_size=8, embed_dim=8, depth=2, num_heads=2)
        a = init_params(cfg, seed=11)
        b = init_params(cfg, seed=11)
        c = init_params(cfg, seed=12)
        for (name, ta), (_, tb) in zip(a.named_tensors(), b.named_tensors()):
            np.testing.assert_array_equal(ta.data, tb.data, err_msg=name)
        assert any(not np.array_equal(ta.data, tc.data)
                   for (_, ta), (_, tc) in zip(a.named_tensors(), c.named_tensors()))

    def test_truncation_bound_and_affine_defaults(self):
        cfg = VitConfig(image_size=16, patch_size=8, embed_dim=8, depth=1, num_heads=2)
        p = init_params(cfg, seed=0)
        assert np.abs(p.patch_weight.data).max() <= 0.04  # 2 sigma, sigma=0.02
        assert np.abs(p.pos_embed.data).max() <= 0.04
        np.testing.assert_array_equal(p.patch_bias.data, 0.0)
        np.testing.assert_array_equal(p.head_bias.data, 0.0)
        np.testing.assert_array_equal(p.blocks[0].ln1_gamma.data, 1.0)
        np.testing.assert_array_equal(p.final_gamma.data, 1.0)
        assert all(t.requires_grad for _, t in p.named_tensors())

    def test_copy_is_deep(self):
        cfg = VitConfig(image_size=16, patch_size=8, embed_dim=8, depth=1, num_heads=2)
        p = init_params(cfg, seed=0)
        q = p.copy()
        q.patch_weight.data[0, 0] += 1.0
        assert p.patch_weight.data[0, 0] != q.patch_weight.data[0, 0]


class TestPatchify:
    def test_layout_against_loop_oracle(self):
        rng = np.random.default_rng(0)
        img = rng.normal(size=(2, 3, 4, 4))
        p = 2
        out = patchify(img, p)
        assert out.shape == (2, 4, 12)
        for b in range(2):
            for gy in range(2):
                for gx in range(2):
                    for c in range(3):
                        for py in range(p):
                            for px in range(p):
                                got = out[b, gy * 2 + gx, c * p * p + py * p + px]
                                want = img[b, c, gy * p + py, gx * p + px]
                                assert got == want

    def test_patchify_is_lossless(self):
        img = np.arange(3 * 8 * 8, dtype=float).reshape(1, 3, 8, 8)
        out = patchify(img, 4)
        assert sorted(out.reshape(-1)) == sorted(img.reshape(-1))


class TestPatchEmbed:
    def test_one_hot_projection_reads_single_pixel(self):
        cfg = VitConfig(image_size=4, patch_size=2, embed_dim=4, depth=1, num_heads=2)
        params = init_params(cfg, seed=0)
        params.patch_weight.data[:] = 0.0
        params.patch_bias.data[:] = 0.0
        # embedding channel 1 reads channel 2, py=1, px=0 of each patch
        j = 2 * 4 + 1 * 2 + 0
        params.patch_weight.data[1, j] = 1.0
        img = np.random.default_rng(1).normal(size=(3, 4, 4))
        tokens = patch_embed(Tensor(img), params, cfg)
        assert tokens.shape == (4, 4)
        for gy in range(2):
            for gx in range(2):
                want = img[2, gy * 2 + 1, gx * 2 + 0]
                assert tokens.data[gy * 2 + gx, 1] == pytest.approx(want)
                assert tokens.data[gy * 2 + gx, 0] == 0.0

    def test_shape_contract(self):
        cfg = VitConfig(image_size=4, patch_size=2, embed_dim=4, depth=1, num_heads=2)
        params = init_params(cfg, seed=0)
        with pytest.raises(ShapeError):
            patch_embed(Tensor(np.zeros((3, 8, 8))), params, cfg)


class TestAttention:
    def test_single_token_bypasses_mixing(self):
        # T=1: softmax over one score is 1, so out = x Wv^T Wo^T exactly
        d = 4
        block = zero_block(d, d)
        rng = np.random.default_rng(0)
        block.wv.data[:] = rng.normal(size=(d, d))
        block.wo.data[:] = rng.normal(size=(d, d))
        x = rng.normal(size=(1, d))
        out = mhsa(Tensor(x), block, num_heads=2)
        want = x @ block.wv.data.T @ block.wo.data.T
        np.testing.assert_allclose(out.data, want, atol=1e-12)

    def test_hand_softmax_oracle_one_head(self):
        d, t = 2, 2
        block = zero_block(d, d)
        for w in (block.wq, block.wk, block.wv, block.wo):
            w.data[:] = np.eye(d)
        x = np.array([[1.0, 0.0], [0.0, 1.0]])
        out = mhsa(Tensor(x), block, num_heads=1).data
        # independent numpy evaluation
        scores = (x @ x.T) / np.sqrt(d)
        e = np.exp(scores - scores.max(axis=-1, keepdims=True))
        attn = e / e.sum(axis=-1, keepdims=True)
        np.testing.assert_allclose(out, attn @ x, atol=1e-12)

    def test_batched_equals_unbatched(self):
        d = 8
        rng = np.random.default_rng(3)
        block = zero_block(d, 2 * d)
        for w in (block.wq, block.wk, block.wv, block.wo):
            w.data[:] = rng.normal(size=(d, d))
        x = rng.normal(size=(5, d))
        single = mhsa(Tensor(x), block, num_heads=2).data
        batched = mhsa(Tensor(np.stack([x, 2 * x])), block, num_heads=2).data
        np.testing.assert_allclose(batched[0], single, atol=1e-12)

    def test_token_permutation_equivariance(self):
        d = 6
        rng = np.random.default_rng(4)
        block = zero_block(d, d)
        for w in (block.wq, block.wk, block.wv, block.wo):
            w.data[:] = rng.normal(size=(d, d))
        x = rng.normal(size=(5, d))
        perm = np.array([3, 0, 4, 1, 2])
        base = mhsa(Tensor(x), block, num_heads=3).data
        permuted = mhsa(Tensor(x[perm]), block, num_heads=3).data
        np.testing.assert_allclose(permuted, base[perm], atol=1e-12)

    def test_head_count_must_divide(self):
        block = zero_block(6, 6)
        with pytest.raises(ConfigError):
            mhsa(Tensor(np.zeros((2, 6))), block, num_heads=4)


class TestEncoderBlock:
    def test_zero_weights_are_identity(self):
        # both residual branches contribute exactly zero
        d = 4
        block = zero_block(d, 8)
        x = np.random.default_rng(0).normal(size=(2, 5, d))
        out = encoder_block(Tensor(x), block, num_heads=2)
        np.testing.assert_allclose(out.data, x, atol=1e-15)

    def test_dropout_needs_rng_in_training(self):
        block = zero_block(4, 8)
        with pytest.raises(ContractError):
            encoder_block(Tensor(np.zeros((1, 2, 4))), block, num_heads=2,
                          dropout_rate=0.5, training=True, rng=None)

    def test_dropout_off_in_eval_mode(self):
        block = zero_block(4, 8)
        x = np.random.default_rng(1).normal(size=(1, 3, 4))
        out = encoder_block(Tensor(x), block, num_heads=2, dropout_rate=0.9,
                            training=False)
        np.testing.assert_allclose(out.data, x, atol=1e-15)


class TestForward:
    def test_shapes_and_state_count(self):
        cfg = VitConfig(image_size=16, patch_size=4, embed_dim=8, depth=3, num_heads=2)
        params = init_params(cfg, seed=0)
        batch = Tensor(np.random.default_rng(0).normal(size=(2, 3, 16, 16)))
        logits, states = vit_forward_features(batch, params, cfg)
        assert logits.shape == (2, 2)
        assert len(states) == cfg.depth + 1
        for s in states:
            assert s.shape == (2, cfg.num_patches + 1, cfg.embed_dim)
        np.testing.assert_array_equal(
            logits.data, vit_forward(batch, params, cfg).data)

    def test_batch_shape_contract(self):
        cfg = VitConfig(image_size=16, patch_size=4, embed_dim=8, depth=1, num_heads=2)
        params = init_params(cfg, seed=0)
        with pytest.raises(ShapeError):
            vit_forward(Tensor(np.zeros((2, 3, 8, 8))), params, cfg)
        with pytest.raises(NumericError):
            vit_forward(Tensor(np.full((1, 3, 16, 16), np.nan)), params, cfg)

    def test_positional_embedding_breaks_patch_symmetry(self):
        cfg = VitConfig(image_size=16, patch_size=8, embed_dim=8, depth=1, num_heads=2)
        params = init_params(cfg, seed=5)
        img = np.zeros((1, 3, 16, 16))
        img[0, :, :8, :8] = 1.0  # bright patch at grid (0,0)
        moved = np.zeros((1, 3, 16, 16))
        moved[0, :, 8:, 8:] = 1.0  # same patch content at grid (1,1)
        a = vit_forward(Tensor(img), params, cfg).data
        b = vit_forward(Tensor(moved), params, cfg).data
        assert not np.allclose(a, b)

    def test_numeric_error_names_block(self):
        cfg = VitConfig(image_size=16, patch_size=8, embed_dim=8, depth=2, num_heads=2)
        params = init_params(cfg, seed=0)
        params.blocks[1].wq.data[0, 0] = np.nan
        with pytest.raises(NumericError, match="block 1"):
            vit_forward(Tensor(np.zeros((1, 3, 16, 16))), params, cfg)

    def test_predict_returns_binary_labels(self):
        cfg = VitConfig(image_size=16, patch_size=8, embed_dim=8, depth=1, num_heads=2)
        params = init_params(cfg, seed=0)
        labels = predict(np.random.default_rng(0).normal(size=(4, 3, 16, 16)),
                         params, cfg)
        assert labels.shape == (4,)
        assert set(labels) <= {0, 1}

    def test_dropout_training_determinism(self):
        cfg = VitConfig(image_size=16, patch_size=8, embed_dim=8, depth=2,
                        num_heads=2, dropout_rate=0.3)
        params = init_params(cfg, seed=0)
        batch = Tensor(np.random.default_rng(1).normal(size=(2, 3, 16, 16)))
        a = vit_forward(batch, params, cfg, training=True,
                        rng=np.random.default_rng(42)).data
        b = vit_forward(batch, params, cfg, training=True,
                        rng=np.random.default_rng(42)).data
        c = vit_forward(batch, params, cfg, training=True,
                        rng=np.random.default_rng(43)).data
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, c)


class TestEndToEndGradient:
    """Finite differences through the whole network, per parameter tensor."""

    def setup_method(self):
        self.cfg = VitConfig(image_size=8, patch_size=4, embed_dim=4, depth=1,
                             num_heads=2, mlp_ratio=2.0)
        self.params = init_params(self.cfg, seed=0)
        rng = np.random.default_rng(1)
        self.batch = rng.normal(size=(2, 3, 8, 8))
        self.readout = Tensor(rng.normal(size=(2, 2)))

    def loss_through(self, _tensor):
        logits = vit_forward(Tensor(self.batch), self.params, self.cfg)
        return ad.tsum(ad.mul(logits, self.readout))

    @pytest.mark.parametrize("name", [
        "patch_weight", "patch_bias", "class_token", "pos_embed",
        "blocks.0.wq", "blocks.0.wv", "blocks.0.ln1_gamma", "blocks.0.mlp_w1",
        "blocks.0.mlp_b2", "final_gamma", "head_weight", "head_bias",
    ])
    def test_parameter_gradient(self, name):
        tensor = dict(self.params.named_tensors())[name]
        err = grad_check(self.loss_through, tensor)
        assert err < 1e-5, f"{name}: worst relative error {err}"


class TestCheckpoint:
    def make(self, tmp_path, seed=7):
        cfg = VitConfig(image_size=16, patch_size=4, embed_dim=8, depth=2, num_heads=2)
        params = init_params(cfg, seed=seed)
        path = tmp_path / "model.vitw"
        save_params(path, params, cfg)
        return cfg, params, path

    def test_roundtrip_bitwise(self, tmp_path):
        cfg, params, path = self.make(tmp_path)
        loaded, loaded_cfg = load_params(path, cfg)
        assert loaded_cfg == cfg
        for (name, a), (_, b) in zip(params.named_tensors(), loaded.named_tensors()):
            np.testing.assert_array_equal(a.data, b.data, err_msg=name)

    def test_rewrite_is_byte_identical(self, tmp_path):
        cfg, params, path = self.make(tmp_path)
        first = path.read_bytes()
        save_params(path, params, cfg)
        assert path.read_bytes() == first

    def test_magic_checked(self, tmp_path):
        _, _, path = self.make(tmp_path)
        raw = bytearray(path.read_bytes())
        raw[0] ^= 0xFF
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError, match="magic"):
            load_params(path)

    def test_version_checked(self, tmp_path):
        _, _, path = self.make(tmp_path)
        raw = bytearray(path.read_bytes())
        raw[4:8] = struct.pack("<I", 99)
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointVersionError):
            load_params(path)

    def test_config_mismatch_rejected(self, tmp_path):
        cfg, _, path = self.make(tmp_path)
        other = VitConfig(image_size=16, patch_size=4, embed_dim=8, depth=1, num_heads=2)
        with pytest.raises(CheckpointConfigError):
            load_params(path, other)

    def test_trailing_bytes_rejected(self, tmp_path):
        _, _, path = self.make(tmp_path)
        path.write_bytes(path.read_bytes() + b"x")
        with pytest.raises(CheckpointConfigError, match="trailing"):
            load_params(path)

    def test_every_truncation_point_detected(self, tmp_path):
        _, _, path = self.make(tmp_path)
        raw = path.read_bytes()
        cut_points = sorted(set(range(0, 64)) | set(
            np.linspace(64, len(raw) - 1, 40, dtype=int).tolist()))
        for cut in cut_points:
            path.write_bytes(raw[:cut])
            with pytest.raises(CheckpointTruncatedError):
                load_params(path)

    def test_refuses_to_save_non_finite(self, tmp_path):
        cfg, params, path = self.make(tmp_path)
        params.head_weight.data[0, 0] = np.inf
        with pytest.raises(NumericError, match="head_weight"):
            save_params(tmp_path / "bad.vitw", params, cfg)

    def test_magic_constant(self):
        assert CHECKPOINT_MAGIC == b"VITW"
