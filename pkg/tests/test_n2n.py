"""Neighborhood token bags: bi-directional bag attention and pooling."""

import numpy as np
import pytest

from cloudtrack import n2n, nn
from cloudtrack.errors import ConfigError, TokenAssemblyError

CFG = n2n.NeighborhoodConfig(k=5, num_levels=2, channels=8, num_heads=2, num_bands=3)


def make_bags(rng, cfg, q=3, t=4, cf=6, mode="n2n", dtype=np.float32):
    ctx_f = nn.Tensor(rng.standard_normal((q, t, cfg.k, cf)).astype(dtype), requires_grad=True)
    ctx_o = rng.standard_normal((q, t, cfg.k, 3)).astype(dtype)
    if mode == "n2n":
        sup_f = nn.Tensor(rng.standard_normal((q, cfg.k, cf)).astype(dtype), requires_grad=True)
        sup_o = rng.standard_normal((q, cfg.k, 3)).astype(dtype)
        return n2n.LevelBags(ctx_f, ctx_o, support_feats=sup_f, support_offsets=sup_o)
    query_f = nn.Tensor(rng.standard_normal((q, cf)).astype(dtype), requires_grad=True)
    return n2n.LevelBags(ctx_f, ctx_o, query_feats=query_f)


class TestNeighborhoodConfig:
    @pytest.mark.parametrize(
        "kwargs",
        [
            dict(k=0),
            dict(num_levels=0),
            dict(channels=10, num_heads=4),
            dict(channels=0),
            dict(mlp_ratio=0.0),
            dict(num_bands=0),
            dict(attention_mode="cross"),
        ],
    )
    def test_rejects_bad_config(self, kwargs):
        with pytest.raises(ConfigError):
            n2n.NeighborhoodConfig(**kwargs)

    def test_derived_widths(self):
        cfg = n2n.NeighborhoodConfig(k=8, num_levels=3, channels=16, num_heads=4)
        assert cfg.head_dim == 4
        assert cfg.summary_width == 48

    def test_dict_round_trip(self):
        cfg = n2n.NeighborhoodConfig(
            k=7, num_levels=2, channels=12, num_heads=3, mlp_ratio=1.5,
            num_bands=4, attention_mode="p2n", offset_attention_bias=True,
            share_level_weights=True,
        )
        assert n2n.NeighborhoodConfig.from_dict(cfg.to_dict()) == cfg


class TestAttentionPool:
    def test_learned_probe_shape(self):
        rng = np.random.default_rng(0)
        tokens = nn.Tensor(rng.standard_normal((6, 5, 8)).astype(np.float32))
        out = n2n.attention_pool(nn.ParamStore(seed=1), "pool", CFG, tokens)
        assert out.shape == (6, 8)

    def test_explicit_probe_changes_output(self):
        rng = np.random.default_rng(1)
        tokens = nn.Tensor(rng.standard_normal((4, 5, 8)).astype(np.float32))
        params = nn.ParamStore(seed=2)
        p1 = nn.Tensor(rng.standard_normal((4, 8)).astype(np.float32))
        p2 = nn.Tensor(rng.standard_normal((4, 8)).astype(np.float32))
        a = n2n.attention_pool(params, "pool", CFG, tokens, probe=p1)
        b = n2n.attention_pool(params, "pool", CFG, tokens, probe=p2)
        assert not np.allclose(a.data, b.data)

    def test_token_permutation_invariance(self):
        # pooling attends over the bag; token order must not matter
        rng = np.random.default_rng(2)
        tokens = rng.standard_normal((3, 6, 8)).astype(np.float32)
        params = nn.ParamStore(seed=3)
        perm = rng.permutation(6)
        a = n2n.attention_pool(params, "pool", CFG, nn.Tensor(tokens))
        b = n2n.attention_pool(params, "pool", CFG, nn.Tensor(tokens[:, perm]))
        np.testing.assert_allclose(a.data, b.data, rtol=0, atol=1e-6)


class TestN2NBlock:
    def test_output_shape(self):
        rng = np.random.default_rng(0)
        bags = make_bags(rng, CFG)
        out = n2n.n2n_block(nn.ParamStore(seed=1), "blk", CFG, bags)
        assert out.shape == (3, 4, CFG.channels)

    def test_requires_support_bag(self):
        rng = np.random.default_rng(1)
        bags = make_bags(rng, CFG, mode="p2n")
        with pytest.raises(TokenAssemblyError):
            n2n.n2n_block(nn.ParamStore(), "blk", CFG, bags)

    def test_rejects_mismatched_bags(self):
        rng = np.random.default_rng(2)
        bags = make_bags(rng, CFG)
        bags.support_offsets = bags.support_offsets[:, :-1]
        with pytest.raises(TokenAssemblyError):
            n2n.n2n_block(nn.ParamStore(), "blk", CFG, bags)

    def test_deterministic(self):
        out = []
        for _ in range(2):
            bags = make_bags(np.random.default_rng(3), CFG)
            out.append(n2n.n2n_block(nn.ParamStore(seed=4), "blk", CFG, bags).data)
        np.testing.assert_array_equal(out[0], out[1])

    def test_bag_permutation_invariance(self):
        # both bags are sets: reordering tokens leaves the summary unchanged
        rng = np.random.default_rng(4)
        q, t, cf = 3, 4, 6
        ctx_f = rng.standard_normal((q, t, CFG.k, cf)).astype(np.float32)
        ctx_o = rng.standard_normal((q, t, CFG.k, 3)).astype(np.float32)
        sup_f = rng.standard_normal((q, CFG.k, cf)).astype(np.float32)
        sup_o = rng.standard_normal((q, CFG.k, 3)).astype(np.float32)
        params = nn.ParamStore(seed=5)
        base = n2n.n2n_block(
            params, "blk", CFG,
            n2n.LevelBags(nn.Tensor(ctx_f), ctx_o, nn.Tensor(sup_f), sup_o),
        )
        pc, ps = rng.permutation(CFG.k), rng.permutation(CFG.k)
        permuted = n2n.n2n_block(
            params, "blk", CFG,
            n2n.LevelBags(
                nn.Tensor(ctx_f[:, :, pc]), ctx_o[:, :, pc],
                nn.Tensor(sup_f[:, ps]), sup_o[:, ps],
            ),
        )
        np.testing.assert_allclose(base.data, permuted.data, rtol=0, atol=1e-5)

    def test_gradients_reach_both_bags(self):
        rng = np.random.default_rng(5)
        bags = make_bags(rng, CFG)
        out = n2n.n2n_block(nn.ParamStore(seed=6), "blk", CFG, bags)
        nn.reduce_sum(out).backward()
        assert bags.context_feats.grad is not None
        assert bags.support_feats.grad is not None
        assert np.any(bags.context_feats.grad != 0)
        assert np.any(bags.support_feats.grad != 0)

    def test_offset_bias_flag_changes_output(self):
        cfg_bias = n2n.NeighborhoodConfig(
            k=5, num_levels=2, channels=8, num_heads=2, num_bands=3,
            offset_attention_bias=True,
        )
        rng = np.random.default_rng(6)
        bags = make_bags(rng, CFG)
        plain = n2n.n2n_block(nn.ParamStore(seed=7), "blk", CFG, bags)
        bags2 = make_bags(np.random.default_rng(6), cfg_bias)
        biased = n2n.n2n_block(nn.ParamStore(seed=7), "blk", cfg_bias, bags2)
        assert plain.shape == biased.shape
        assert not np.allclose(plain.data, biased.data)


class TestPointToNeighborhood:
    def test_output_shape(self):
        rng = np.random.default_rng(0)
        bags = make_bags(rng, CFG, mode="p2n")
        out = n2n.point_to_neighborhood(nn.ParamStore(seed=1), "blk", CFG, bags)
        assert out.shape == (3, 4, CFG.channels)

    def test_requires_query_features(self):
        rng = np.random.default_rng(1)
        bags = make_bags(rng, CFG, mode="n2n")
        with pytest.raises(TokenAssemblyError):
            n2n.point_to_neighborhood(nn.ParamStore(), "blk", CFG, bags)

    def test_gradients_reach_query_and_context(self):
        rng = np.random.default_rng(2)
        bags = make_bags(rng, CFG, mode="p2n")
        out = n2n.point_to_neighborhood(nn.ParamStore(seed=3), "blk", CFG, bags)
        nn.reduce_sum(out).backward()
        assert np.any(bags.query_feats.grad != 0)
        assert np.any(bags.context_feats.grad != 0)


class TestSummarizeLevels:
    def test_concatenates_levels(self):
        rng = np.random.default_rng(0)
        bags = [make_bags(rng, CFG) for _ in range(CFG.num_levels)]
        out = n2n.summarize_levels(nn.ParamStore(seed=1), CFG, bags)
        assert out.shape == (3, 4, CFG.summary_width)

    def test_rejects_wrong_level_count(self):
        rng = np.random.default_rng(1)
        with pytest.raises(TokenAssemblyError):
            n2n.summarize_levels(nn.ParamStore(), CFG, [make_bags(rng, CFG)])

    def test_p2n_mode_dispatch(self):
        cfg = n2n.NeighborhoodConfig(
            k=5, num_levels=1, channels=8, num_heads=2, num_bands=3,
            attention_mode="p2n",
        )
        rng = np.random.default_rng(2)
        out = n2n.summarize_levels(
            nn.ParamStore(seed=3), cfg, [make_bags(rng, cfg, mode="p2n")]
        )
        assert out.shape == (3, 4, 8)

    def test_share_level_weights_uses_one_param_set(self):
        rng = np.random.default_rng(3)
        shared_cfg = n2n.NeighborhoodConfig(
            k=5, num_levels=2, channels=8, num_heads=2, num_bands=3,
            share_level_weights=True,
        )
        params = nn.ParamStore(seed=4)
        n2n.summarize_levels(params, shared_cfg, [make_bags(rng, shared_cfg) for _ in range(2)])
        names = set(params.arrays())
        assert all(name.startswith("n2n.shared.") for name in names)

        params2 = nn.ParamStore(seed=4)
        n2n.summarize_levels(params2, CFG, [make_bags(rng, CFG) for _ in range(2)])
        names2 = set(params2.arrays())
        assert any(name.startswith("n2n.level0.") for name in names2)
        assert any(name.startswith("n2n.level1.") for name in names2)
        assert len(names2) == 2 * len(names)
