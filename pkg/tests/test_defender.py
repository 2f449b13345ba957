import numpy as np
import pytest

from plugin_defense import autodiff as ad
from plugin_defense.autodiff import Tensor
from plugin_defense.data import gen_textures
from plugin_defense.defender import (DefenderConfig, DefenderModel, build_defender, defend, group_count, initialize,
                                     partition_params, proxy_pretrain, zero_decode_path)
from plugin_defense.errors import ConfigError, ContractError
from plugin_defense.nn import LAYER_NORM, extract_patches, pixel_shuffle_decode


def small_cfg(**kw):
    base = dict(channels=1, image_size=(16, 16), patch=4, dim=24, layers=2, heads=2, seed=0)
    base.update(kw)
    return DefenderConfig(**base)


class TestBuild:
    def test_boundary_dim(self):
        build_defender(small_cfg(dim=16, heads=2))
        with pytest.raises(ConfigError):
            build_defender(small_cfg(dim=15, heads=3))

    def test_indivisible_geometry(self):
        with pytest.raises(ConfigError):
            build_defender(small_cfg(image_size=(18, 16)))

    def test_default_desk_config(self):
        model = build_defender()
        assert model.input_shape == (3, 32, 32)
        assert model.embed.num_tokens == 16
        assert group_count(model.partition()[0]) == (16, 3072)

    @pytest.mark.parametrize("processor", ["transformer", "linear", "ffn", "bottleneck", "fd"])
    def test_output_shape_matches_input(self, processor, rng):
        model = build_defender(small_cfg(processor=processor, fd_hidden=8))
        x = rng.random((2, 1, 16, 16)).astype(np.float32)
        assert model.defend(x).shape == x.shape
        assert defend(model, x[0]).shape == x[0].shape

    def test_unknown_processor_and_policy(self):
        with pytest.raises(ConfigError):
            small_cfg(processor="lstm")
        with pytest.raises(ConfigError):
            small_cfg(policy="some")

    def test_shape_mismatch(self, rng):
        model = build_defender(small_cfg())
        with pytest.raises(ContractError):
            model.defend(rng.random((1, 3, 16, 16)))


class TestDefend:
    def test_zero_feature_is_exact_identity(self, rng):
        model = zero_decode_path(build_defender(small_cfg()))
        x = rng.random((3, 1, 16, 16)).astype(np.float32)
        np.testing.assert_array_equal(model.defend(x), x)

    def test_staged_pipeline_oracle(self, f64, rng):
        model = build_defender(small_cfg(init_std=0.2))
        x = rng.random((1, 16, 16))
        patches = extract_patches(Tensor(x), 4).data
        tokens = patches @ model.embed.projection.data.T + model.embed.pos_embed.data
        for layer in model.processor.layers:
            tokens = layer(Tensor(tokens)).data
        feature = pixel_shuffle_decode(Tensor(tokens), 1, 4, (4, 4)).data
        np.testing.assert_allclose(model.defend(x) - x, feature, atol=1e-12)

    def test_output_not_clipped(self, rng):
        model = build_defender(small_cfg(init_std=0.5))
        out = model.defend(np.ones((1, 16, 16), dtype=np.float32))
        assert out.max() > 1.0 or out.min() < 0.0

    def test_without_residual_differs(self, rng):
        x = rng.random((2, 1, 16, 16)).astype(np.float32)
        with_res = build_defender(small_cfg())
        without = build_defender(small_cfg(residual=False))
        assert not np.allclose(with_res.defend(x), without.defend(x))
        np.testing.assert_allclose(with_res.defend(x) - x, without.defend(x), atol=1e-6)

    def test_deterministic(self, rng):
        x = rng.random((2, 1, 16, 16)).astype(np.float32)
        a, b = build_defender(small_cfg()), build_defender(small_cfg())
        np.testing.assert_array_equal(a.defend(x), b.defend(x))


class TestPartition:
    def test_layer_norm_only(self):
        model = build_defender(small_cfg())
        theta1, theta2 = partition_params(model, "layer-norm-only")
        assert all(p.group == LAYER_NORM and "ln" in p.name for p in theta1)
        assert group_count(theta1) == (4 * 2, 4 * 2 * 24)
        assert {p.name for p in theta1}.isdisjoint({p.name for p in theta2})
        assert len(theta1) + len(theta2) == len(model.parameters())

    def test_paper_scale_count(self):
        cfg = DefenderConfig(channels=3, image_size=(32, 32), patch=8, dim=768, layers=12, heads=12)
        assert group_count(build_defender(cfg).partition()[0]) == (48, 36864)

    def test_all_and_none(self):
        model = build_defender(small_cfg())
        assert partition_params(model, "all")[1] == []
        assert partition_params(model, "none")[0] == []

    def test_embedding_frozen_unless_flagged(self):
        plain = build_defender(small_cfg(embed_norm=True))
        assert all(not n.startswith("ln_embed") for n in (p.name for p in plain.partition()[0]))
        flagged = build_defender(small_cfg(embed_norm=True, embed_norm_trainable=True))
        assert {"ln_embed.gamma", "ln_embed.beta"} <= {p.name for p in flagged.partition()[0]}
        assert all(not p.trainable for p in flagged.embed.parameters())

    def test_trainable_flags_follow_policy(self):
        model = build_defender(small_cfg())
        assert set(model.trainable_parameters()) == set(model.partition()[0])

    def test_gradient_reaches_layer_norms(self, rng):
        model = build_defender(small_cfg())
        loss = ad.mean(ad.square(model(Tensor(rng.random((2, 1, 16, 16))))))
        grads = ad.grad(loss, model.trainable_parameters())
        assert all(np.abs(g).sum() > 0 for g in grads)

    def test_non_transformer_default_policy(self):
        model = build_defender(small_cfg(processor="ffn"))
        assert model.config.policy == "processor"
        assert all(p.name.startswith("processor.") for p in model.trainable_parameters())


class TestProxyPretrain:
    def corpus(self):
        return gen_textures(64, channels=1, size=16, seed=3)

    def test_zero_steps_is_random_init(self):
        a, b = build_defender(small_cfg()), build_defender(small_cfg())
        proxy_pretrain(b, self.corpus(), 0)
        for (n, p), (_, q) in zip(a.named_parameters(), b.named_parameters()):
            np.testing.assert_array_equal(p.data, q.data, err_msg=n)

    def test_loss_decreases(self):
        model = proxy_pretrain(build_defender(small_cfg()), self.corpus(), 100, seed=1, lr=3e-3)
        assert np.mean(model.pretrain_losses[-10:]) < np.mean(model.pretrain_losses[:10])

    def test_deterministic_and_policy_restored(self):
        a = proxy_pretrain(build_defender(small_cfg()), self.corpus(), 5, seed=2)
        b = proxy_pretrain(build_defender(small_cfg()), self.corpus(), 5, seed=2)
        for (_, p), (_, q) in zip(a.named_parameters(), b.named_parameters()):
            np.testing.assert_array_equal(p.data, q.data)
        assert set(a.trainable_parameters()) == set(a.partition()[0])

    def test_embedding_untouched(self):
        fresh = build_defender(small_cfg())
        model = proxy_pretrain(build_defender(small_cfg()), self.corpus(), 5, seed=2)
        np.testing.assert_array_equal(fresh.embed.projection.data, model.embed.projection.data)

    def test_initialize_dispatch(self):
        with pytest.raises(ConfigError):
            initialize(build_defender(small_cfg()), {"kind": "proxy", "corpus": "missing"}, {})
        with pytest.raises(ConfigError):
            initialize(build_defender(small_cfg()), {"kind": "hub"})
        model = initialize(build_defender(small_cfg()), {"kind": "proxy", "corpus": "t", "steps": 2},
                           {"t": self.corpus()})
        assert len(model.pretrain_losses) == 2
