import numpy as np
import pytest

from semtok import tensor as T
from semtok.channel import ChannelSpec
from semtok.selection import TokenSequence
from semtok.tensor import ContractError, DimensionError, make_rng
from semtok.transformer import (Model, ModelConfig, block_prefix, make_budget_token, masked_block,
                                mha_block, parameter_shapes, patch_embed)


def small_config(**kw):
    base = dict(image_size=16, patch_size=4, d=8, heads=2, mlp_ratio=2, L_e=2, L_d=2)
    base.update(kw)
    return ModelConfig(**base)


def pruning_model(config, seed):
    """A model whose selection layers actually drop a random share of tokens."""
    model = Model(config, seed=seed)
    rng = make_rng(seed, 99)
    for name, p in model.named_parameters():
        if ".sel.gate_weight" in name:
            p.data[:] = rng.standard_normal(p.data.shape)
        elif ".sel.thresh_bias" in name:
            p.data[:] = rng.uniform(-1.0, 0.5)
    return model


def image(config, seed):
    return make_rng(seed, 5).uniform(0, 1, (config.channels, config.image_size, config.image_size))


class TestConfig:
    def test_defaults_give_sixteen_patches(self):
        assert ModelConfig().n_patches == 16

    @pytest.mark.parametrize("kw", [dict(image_size=30), dict(heads=5), dict(L_e=0), dict(lam=-1.0),
                                    dict(penalty="median")])
    def test_invalid(self, kw):
        with pytest.raises(ContractError):
            ModelConfig(**kw)

    def test_local_decoder_has_no_selection_parameters(self):
        names = [n for n, _ in parameter_shapes(ModelConfig(penalty="local"))]
        assert any(n.startswith("enc.") and ".sel." in n for n in names)
        assert not any(n.startswith("dec.") and ".sel." in n for n in names)

    def test_global_decoder_has_selection_parameters(self):
        names = [n for n, _ in parameter_shapes(ModelConfig(penalty="global"))]
        assert any(n.startswith("dec.") and ".sel." in n for n in names)


class TestPatchEmbed:
    def test_row_layout(self):
        cfg = ModelConfig()
        seq = patch_embed(np.zeros((1, 32, 32)), Model(cfg).params, cfg)
        assert seq.tokens.shape == (18, cfg.d)
        assert seq.n == 16 and seq.n_active == 16

    def test_zero_image_gives_positions(self):
        cfg = small_config()
        model = Model(cfg)
        model.params["patch.weight"].data[:] = 0.0
        model.params["patch.bias"].data[:] = 0.3
        seq = patch_embed(image(cfg, 0), model.params, cfg)
        np.testing.assert_array_equal(seq.tokens.data[2:], model.params["pos_embed"].data + 0.3)

    def test_locality(self):
        cfg = small_config()
        model = Model(cfg)
        a = image(cfg, 1)
        b = a.copy()
        b[0, 4:8, 8:12] += 1.0  # grid cell (1, 2) = patch 6
        diff = np.any(patch_embed(a, model.params, cfg).tokens.data
                      != patch_embed(b, model.params, cfg).tokens.data, axis=1)
        assert np.flatnonzero(diff).tolist() == [2 + 6]

    def test_wrong_size(self):
        cfg = small_config()
        with pytest.raises(DimensionError):
            patch_embed(np.zeros((1, 12, 12)), Model(cfg).params, cfg)


class TestBudgetToken:
    def test_linear(self):
        emb = T.tensor([2.0, -4.0])
        np.testing.assert_array_equal(make_budget_token(0.0, emb).data, [0.0, 0.0])
        np.testing.assert_array_equal(make_budget_token(1.0, emb).data, emb.data)
        np.testing.assert_array_equal(make_budget_token(0.5, emb).data, [1.0, -2.0])

    @pytest.mark.parametrize("alpha", [-0.1, 1.5])
    def test_out_of_range(self, alpha):
        with pytest.raises(ContractError):
            make_budget_token(alpha, T.tensor([1.0]))


class TestBlock:
    def test_zero_weights_are_identity(self):
        cfg = small_config()
        model = Model(cfg)
        prefix = block_prefix(cfg, 0)
        for name, p in model.named_parameters():
            if name.startswith(prefix) and (".attn." in name or ".mlp." in name):
                p.data[:] = 0.0
        x = T.tensor(np.random.default_rng(0).standard_normal((5, cfg.d)))
        np.testing.assert_array_equal(mha_block(x, model.params, prefix, cfg).data, x.data)

    def test_padded_rows_pass_through(self):
        cfg = small_config()
        x = T.tensor(np.random.default_rng(1).standard_normal((5, cfg.d)))
        pad = np.array([False, False, True, False, True])
        y = mha_block(x, Model(cfg).params, "enc.0.", cfg, key_padding=pad)
        np.testing.assert_array_equal(y.data[pad], x.data[pad])

    def test_garbage_in_padded_rows_is_ignored(self):
        cfg = small_config()
        model = Model(cfg, seed=3)
        rng = np.random.default_rng(2)
        seq = TokenSequence(T.tensor(rng.standard_normal((6, cfg.d))), np.array([1, 5, 9, 12]), cfg.n_patches)
        a = masked_block(seq, model.params, "enc.1.", cfg)
        b = masked_block(seq, model.params, "enc.1.", cfg,
                         filler=1e3 * rng.standard_normal((cfg.n_patches + 2, cfg.d)))
        np.testing.assert_allclose(a.data, b.data, atol=1e-12)


class TestModel:
    def test_masked_equals_removed(self):
        cfg = small_config()
        dropped = 0
        for seed in range(5):
            model = pruning_model(cfg, seed)
            x = image(cfg, seed)
            la, sa, ma = model.forward(x, 0.6)
            lb, sb, mb = model.forward(x, 0.6, masked=True)
            assert ma.kept_counts == mb.kept_counts
            dropped += cfg.n_patches + 2 - ma.kept_counts[-1]
            np.testing.assert_allclose(la.data, lb.data, rtol=0, atol=1e-9)
            assert sa.measured_cost == pytest.approx(sb.measured_cost, abs=1e-12)
        assert dropped > 0

    def test_open_gates_match_plain_transformer(self):
        cfg = small_config(score_scaling=False)
        model = Model(cfg, seed=4)
        for name, p in model.named_parameters():
            if name.endswith("sel.thresh_bias"):
                p.data[:] = -800.0
        x = image(cfg, 4)
        a, state, met = model.forward(x, 1.0)
        b, _, _ = model.forward(x, 1.0, selection=False)
        assert met.kept_counts == [cfg.n_patches + 2] * cfg.n_blocks
        np.testing.assert_allclose(a.data, b.data, atol=1e-12)

    def test_deterministic(self):
        cfg = small_config()
        x = image(cfg, 6)
        spec = ChannelSpec.awgn(5.0, seed=1)
        a = Model(cfg, seed=2).forward(x, 0.4, spec, rng=make_rng(1, 0))[0].data
        b = Model(cfg, seed=2).forward(x, 0.4, spec, rng=make_rng(1, 0))[0].data
        np.testing.assert_array_equal(a, b)

    def test_total_packet_loss_still_classifies(self):
        cfg = small_config()
        logits, _, met = Model(cfg).forward(image(cfg, 7), 1.0, ChannelSpec.drop(1.0), rng=make_rng(0))
        assert np.all(np.isfinite(logits.data))
        assert met.kept_counts[cfg.L_e] == 2

    def test_kept_counts_never_increase(self):
        cfg = small_config()
        _, state, met = pruning_model(cfg, 8).forward(image(cfg, 8), 0.3)
        assert all(a >= b for a, b in zip(met.kept_counts, met.kept_counts[1:]))
        assert len(state.layers) == cfg.n_blocks

    def test_local_state_covers_encoder_only(self):
        cfg = small_config(penalty="local")
        _, state, _ = Model(cfg).forward(image(cfg, 9), 0.5)
        assert len(state.layers) == cfg.L_e
