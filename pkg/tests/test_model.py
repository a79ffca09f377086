"""Restorer blocks: attention equivalence, identity inits, shape contracts."""

import numpy as np
import pytest

import deflare.tensor as T
from deflare.model import (
    ModelConfig,
    attention_block,
    channel_attention,
    dual_attention_block,
    gated_directional_ffn,
    init_params,
    linear_attention,
    load_checkpoint,
    quadratic_attention_reference,
    restorer_forward,
    save_checkpoint,
    wrap_params,
)
from deflare.tensor import ConfigError, DimensionError, Tensor, grad_check


def block_view(params, prefix):
    plen = len(prefix) + 1
    return {k[plen:]: v for k, v in params.items() if k.startswith(prefix + ".")}


@pytest.fixture
def toy_setup():
    cfg = ModelConfig(stages=2, base_dim=4, blocks_per_stage=1, in_channels=4)
    store = init_params(cfg, np.random.default_rng(0))
    return cfg, store


class TestLinearAttention:
    def test_single_token_collapses_to_value(self):
        rng = np.random.default_rng(0)
        q = rng.uniform(-1, 1, (1, 4))
        k = rng.uniform(-1, 1, (1, 4))
        v = rng.uniform(-1, 1, (1, 4))
        eps = 1e-6
        out = linear_attention(Tensor(q), Tensor(k), Tensor(v), eps).data
        qp = np.where(q > 0, q, np.expm1(q)) + 1
        kp = np.where(k > 0, k, np.expm1(k)) + 1
        denom = float((qp @ kp.T)[0, 0])
        assert np.abs(out - v).max() <= eps * np.abs(v).max() / denom + 1e-12

    def test_matches_quadratic_oracle(self):
        rng = np.random.default_rng(1)
        q = rng.standard_normal((8, 4))
        k = rng.standard_normal((8, 4))
        v = rng.standard_normal((8, 4))
        lin = linear_attention(Tensor(q), Tensor(k), Tensor(v), 1e-6).data
        quad = quadratic_attention_reference(q, k, v, 1e-6)
        assert np.abs(lin - quad).max() < 1e-10

    def test_identical_keys_give_identical_rows(self):
        # exact position-independence holds in the eps->0 limit
        rng = np.random.default_rng(2)
        q = rng.standard_normal((6, 4))
        k = np.tile(rng.standard_normal((1, 4)), (6, 1))
        v = rng.standard_normal((6, 4))
        out = quadratic_attention_reference(q, k, v, 1e-12)
        assert np.abs(out - out[0]).max() < 1e-10
        lin = linear_attention(Tensor(q), Tensor(k), Tensor(v), 1e-12).data
        assert np.abs(lin - lin[0]).max() < 1e-10

    def test_rejects_nonpositive_eps(self):
        x = Tensor(np.ones((2, 2)))
        with pytest.raises(ConfigError):
            linear_attention(x, x, x, 0.0)


class TestAttentionBlock:
    def test_zero_refinement_equals_plain_core(self, toy_setup):
        cfg, store = toy_setup
        p = {k: v.copy() for k, v in block_view(store, "enc0.blk0").items()}
        p["attn.refine"] = np.zeros_like(p["attn.refine"])
        p["attn.out"] = np.eye(4)  # expose the core through the output proj
        rng = np.random.default_rng(3)
        x = rng.uniform(-1, 1, (1, 4, 3, 3))
        got = attention_block(Tensor(x), wrap_params(p), cfg).data
        tokens = x.reshape(1, 4, 9).transpose(0, 2, 1)[0]
        want = quadratic_attention_reference(
            tokens @ p["attn.wq"], tokens @ p["attn.wk"], tokens @ p["attn.wv"], cfg.attn_eps
        )
        assert np.abs(got[0].reshape(4, 9).T - want).max() < 1e-10

    def test_single_pixel_input_degenerates(self, toy_setup):
        cfg, store = toy_setup
        p = {k: v.copy() for k, v in block_view(store, "enc0.blk0").items()}
        p["attn.out"] = np.eye(4)
        rng = np.random.default_rng(4)
        x = rng.uniform(-1, 1, (1, 4, 1, 1))
        got = attention_block(Tensor(x), wrap_params(p), cfg).data
        token = x.reshape(1, 4)
        v = token @ p["attn.wv"]
        v = v + v * p["attn.refine"][:, 1, 1]  # 1x1 spatial sees kernel centers
        want = quadratic_attention_reference(token @ p["attn.wq"], token @ p["attn.wk"], v, cfg.attn_eps)
        assert np.abs(got.reshape(1, 4) - want).max() < 1e-9

    def test_gradient(self, toy_setup):
        cfg, store = toy_setup
        rng = np.random.default_rng(5)
        p = wrap_params({k: v + rng.uniform(-0.3, 0.3, v.shape) for k, v in block_view(store, "enc0.blk0").items()})
        x0 = rng.uniform(-1, 1, (1, 4, 6, 6))
        r = grad_check(lambda x: attention_block(x, p, cfg).sum(), Tensor(x0))
        assert r.max_rel_error < 1e-4

    def test_multi_head_shape_and_finite(self):
        cfg = ModelConfig(stages=1, base_dim=8, heads=2, in_channels=8)
        store = init_params(cfg, np.random.default_rng(6))
        p = wrap_params(block_view(store, "bot.blk0"))
        x = Tensor(np.random.default_rng(7).uniform(-1, 1, (2, 8, 4, 4)))
        y = attention_block(x, p, cfg)
        assert y.shape == x.shape
        assert np.isfinite(y.data).all()


class TestChannelAttention:
    def test_zero_weights_halve(self):
        rng = np.random.default_rng(8)
        x = rng.uniform(-1, 1, (2, 4, 3, 3))
        y = channel_attention(Tensor(x), Tensor(np.zeros((4, 2))), Tensor(np.zeros((2, 4)))).data
        assert np.allclose(y, 0.5 * x, atol=1e-14)

    def test_constant_channels_pool_exactly(self):
        # binary-representable constants make the mean bit-exact
        consts = np.array([0.25, 0.5, -0.375, 1.5])
        x = np.broadcast_to(consts[None, :, None, None], (1, 4, 5, 5)).copy()
        z = T.global_avg_pool(Tensor(x)).data
        assert np.array_equal(z[0], consts)

    def test_gate_matches_manual(self):
        rng = np.random.default_rng(9)
        x = rng.uniform(-1, 1, (1, 4, 3, 3))
        w1 = rng.uniform(-1, 1, (4, 2))
        w2 = rng.uniform(-1, 1, (2, 4))
        got = channel_attention(Tensor(x), Tensor(w1), Tensor(w2)).data
        z = x.mean(axis=(2, 3))
        gate = 1.0 / (1.0 + np.exp(-(np.maximum(z @ w1, 0.0) @ w2)))
        assert np.allclose(got, x * gate[:, :, None, None], atol=1e-12)

    def test_reduction_must_divide(self):
        with pytest.raises(ConfigError):
            ModelConfig(base_dim=6, gate_reduction=4).validate()

    def test_bad_weight_shapes(self):
        x = Tensor(np.ones((1, 4, 3, 3)))
        with pytest.raises(DimensionError):
            channel_attention(x, Tensor(np.ones((3, 2))), Tensor(np.ones((2, 4))))

    def test_gradient(self):
        rng = np.random.default_rng(10)
        w1 = Tensor(rng.uniform(-1, 1, (4, 2)))
        w2 = Tensor(rng.uniform(-1, 1, (2, 4)))
        x0 = rng.uniform(0.2, 1.0, (1, 4, 4, 4))
        r = grad_check(lambda x: channel_attention(x, w1, w2).sum(), Tensor(x0))
        assert r.max_rel_error < 1e-4


class TestGatedDirectionalFFN:
    def test_zero_projection_gives_zero(self, toy_setup):
        cfg, store = toy_setup
        p = wrap_params(block_view(store, "enc0.blk0"))  # ffn.proj zero-init
        x = Tensor(np.random.default_rng(11).uniform(-1, 1, (1, 4, 4, 4)))
        assert not gated_directional_ffn(x, p).data.any()

    def test_zero_gate_branch_kills_output(self, toy_setup):
        cfg, store = toy_setup
        p = {k: v.copy() for k, v in block_view(store, "enc0.blk0").items()}
        half = p["ffn.expand"].shape[0] // 2
        p["ffn.expand"][half:] = 0.0  # second branch (the gate) is now zero
        p["ffn.proj"] = np.random.default_rng(12).uniform(-1, 1, p["ffn.proj"].shape)
        x = Tensor(np.random.default_rng(13).uniform(-1, 1, (1, 4, 4, 4)))
        assert np.abs(gated_directional_ffn(x, wrap_params(p), ).data).max() < 1e-14

    def test_gradient(self, toy_setup):
        cfg, store = toy_setup
        rng = np.random.default_rng(14)
        p = wrap_params({k: v + rng.uniform(-0.3, 0.3, v.shape) for k, v in block_view(store, "enc0.blk0").items()})
        x0 = rng.uniform(-1, 1, (1, 4, 6, 6))
        r = grad_check(lambda x: gated_directional_ffn(x, p).sum(), Tensor(x0))
        assert r.max_rel_error < 1e-4


class TestDualAttentionBlock:
    def test_identity_at_zero_init(self, toy_setup):
        cfg, store = toy_setup
        p = wrap_params(block_view(store, "enc0.blk0"))
        x = Tensor(np.random.default_rng(15).uniform(-1, 1, (2, 4, 6, 6)))
        y = dual_attention_block(x, p, cfg)
        assert np.array_equal(y.data, x.data)

    def test_shape_preserved(self):
        cfg = ModelConfig(stages=1, base_dim=6, gate_reduction=2, in_channels=6)
        store = init_params(cfg, np.random.default_rng(16))
        p = wrap_params(block_view(store, "bot.blk0"))
        x = Tensor(np.random.default_rng(17).uniform(-1, 1, (3, 6, 5, 7)))
        assert dual_attention_block(x, p, cfg).shape == x.shape

    def test_gradient(self, toy_setup):
        cfg, store = toy_setup
        rng = np.random.default_rng(18)
        p = wrap_params({k: v + rng.uniform(-0.3, 0.3, v.shape) for k, v in block_view(store, "enc0.blk0").items()})
        x0 = rng.uniform(-1, 1, (1, 4, 8, 8))
        r = grad_check(lambda x: dual_attention_block(x, p, cfg).sum(), Tensor(x0))
        assert r.max_rel_error < 1e-4


class TestRestorer:
    def test_zero_output_projection_gives_zeros(self):
        cfg = ModelConfig()
        store = init_params(cfg, np.random.default_rng(19))
        store["f_out.w"] = np.zeros_like(store["f_out.w"])
        x = Tensor(np.random.default_rng(20).uniform(0, 1, (1, 3, 16, 16)))
        y = restorer_forward(x, wrap_params(store), cfg)
        assert not y.data.any()

    def test_output_extents_match_input(self):
        cfg = ModelConfig(stages=2, base_dim=8)
        store = init_params(cfg, np.random.default_rng(21))
        x = Tensor(np.random.default_rng(22).uniform(0, 1, (2, 3, 32, 32)))
        y = restorer_forward(x, wrap_params(store), cfg)
        assert y.shape == (2, 3, 32, 32)

    def test_indivisible_extents_rejected(self):
        cfg = ModelConfig(stages=3, base_dim=8)
        store = init_params(cfg, np.random.default_rng(23))
        with pytest.raises(ConfigError):
            restorer_forward(Tensor(np.ones((1, 3, 18, 18))), wrap_params(store), cfg)

    def test_finite_outputs_across_configs(self):
        rng = np.random.default_rng(24)
        for stages, base_dim, blocks, heads in [(1, 4, 1, 1), (2, 8, 1, 2), (2, 4, 2, 1), (3, 8, 1, 1)]:
            cfg = ModelConfig(stages=stages, base_dim=base_dim, blocks_per_stage=blocks, heads=heads)
            store = init_params(cfg, rng)
            x = Tensor(rng.uniform(0, 1, (1, 3, 16, 16)))
            y = restorer_forward(x, wrap_params(store), cfg, clip_output=True)
            assert np.isfinite(y.data).all()
            assert 0.0 <= y.data.min() and y.data.max() <= 1.0

    def test_inference_clip(self):
        cfg = ModelConfig(stages=1, base_dim=4)
        store = init_params(cfg, np.random.default_rng(25))
        store["f_out.w"] = store["f_out.w"] * 50.0  # force out-of-range raw output
        x = Tensor(np.random.default_rng(26).uniform(0, 1, (1, 3, 8, 8)))
        raw = restorer_forward(x, wrap_params(store), cfg)
        clipped = restorer_forward(x, wrap_params(store), cfg, clip_output=True)
        assert raw.data.max() > 1.0 or raw.data.min() < 0.0
        assert clipped.data.min() >= 0.0 and clipped.data.max() <= 1.0


class TestCheckpoint:
    def test_bit_exact_roundtrip(self, tmp_path):
        cfg = ModelConfig(stages=2, base_dim=8, heads=2)
        store = init_params(cfg, np.random.default_rng(27))
        path = tmp_path / "model.zip"
        save_checkpoint(path, store, cfg, extra={"note": 1})
        loaded, cfg2, header = load_checkpoint(path)
        assert cfg2 == cfg
        assert header["note"] == 1
        assert set(loaded) == set(store)
        for k in store:
            assert loaded[k].dtype == store[k].dtype
            assert np.array_equal(loaded[k], store[k])

    def test_archive_bytes_stable(self, tmp_path):
        cfg = ModelConfig()
        store = init_params(cfg, np.random.default_rng(28))
        p1, p2 = tmp_path / "a.zip", tmp_path / "b.zip"
        save_checkpoint(p1, store, cfg)
        save_checkpoint(p2, store, cfg)
        assert p1.read_bytes() == p2.read_bytes()
