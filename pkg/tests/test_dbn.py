import numpy as np
import pytest
from conftest import two_pattern_dataset

from capsdbn.dbn import (
    CrbmSpec,
    DbnFeatureExtractor,
    DbnStack,
    DbnTrainCfg,
    apply_cd_update,
    cd_step,
    extract_features,
    hidden_prob,
    init_crbm_params,
    max_pool,
    pretrain_greedy,
    sample_bernoulli,
    visible_prob,
)
from capsdbn.errors import ConfigurationError, NumericError, UsageError
from capsdbn.numerics import RandomStream, sigmoid


def small_spec(**overrides):
    kwargs = dict(visible_extent=12, visible_channels=1, groups=4,
                  filter_extent=5, pool_window=2)
    kwargs.update(overrides)
    return CrbmSpec(**kwargs)


class TestCrbmSpec:
    def test_derived_extents(self):
        spec = CrbmSpec(visible_extent=32, visible_channels=3, groups=8,
                        filter_extent=5, pool_window=2)
        assert spec.hidden_extent == 28
        assert spec.pool_extent == 14
        assert small_spec().hidden_extent == 8
        assert small_spec().pool_extent == 4

    def test_non_divisible_pool_rejected_with_named_keys(self):
        with pytest.raises(ConfigurationError) as err:
            CrbmSpec(visible_extent=12, visible_channels=1, groups=2,
                     filter_extent=4, pool_window=2)
        message = str(err.value)
        assert "pool_window" in message and "hidden_extent" in message

    def test_filter_larger_than_visible_rejected(self):
        with pytest.raises(ConfigurationError) as err:
            CrbmSpec(visible_extent=4, visible_channels=1, groups=1,
                     filter_extent=6, pool_window=1)
        assert "filter_extent" in str(err.value)

    def test_stack_chain_validated(self):
        l1 = small_spec()                   # pool_extent 4
        good = CrbmSpec(visible_extent=4, visible_channels=4, groups=6,
                        filter_extent=3, pool_window=2)
        p1 = init_crbm_params(l1, RandomStream(0))
        p2 = init_crbm_params(good, RandomStream(1))
        DbnStack(layers=[(l1, p1), (good, p2)])
        bad = CrbmSpec(visible_extent=5, visible_channels=4, groups=6,
                       filter_extent=4, pool_window=2)
        with pytest.raises(ConfigurationError):
            DbnStack(layers=[(l1, p1), (bad, init_crbm_params(bad, RandomStream(2)))])


class TestHiddenVisibleProb:
    def test_zero_parameters_give_half(self):
        spec = small_spec()
        params = init_crbm_params(spec, RandomStream(1))
        params.filters[...] = 0.0
        v = RandomStream(2).uniform((1, 12, 12))
        np.testing.assert_array_equal(hidden_prob(v, params), np.full((4, 8, 8), 0.5))
        h = RandomStream(3).uniform((4, 8, 8))
        np.testing.assert_array_equal(visible_prob(h, params), np.full((1, 12, 12), 0.5))

    def test_hidden_map_extent(self):
        spec = small_spec()
        params = init_crbm_params(spec, RandomStream(4))
        v = np.zeros((1, 12, 12), dtype=np.float32)
        assert hidden_prob(v, params).shape == (4, 8, 8)

    def test_hidden_matches_scalar_loop_oracle(self):
        spec = CrbmSpec(visible_extent=6, visible_channels=2, groups=3,
                        filter_extent=3, pool_window=2)
        stream = RandomStream(5)
        params = init_crbm_params(spec, stream, scale=0.5)
        params.hidden_bias[...] = stream.normal(3).astype(np.float32)
        v = stream.uniform((2, 6, 6))
        got = hidden_prob(v, params)
        for g in range(3):
            for i in range(4):
                for j in range(4):
                    acc = float(params.hidden_bias[g])
                    for c in range(2):
                        for a in range(3):
                            for b in range(3):
                                acc += float(v[c, i + a, j + b]) * float(
                                    params.filters[g, c, a, b])
                    assert got[g, i, j] == pytest.approx(1 / (1 + np.exp(-acc)), abs=1e-6)

    def test_single_group_unit_filter_closed_form(self):
        spec = CrbmSpec(visible_extent=3, visible_channels=1, groups=1,
                        filter_extent=1, pool_window=1)
        params = init_crbm_params(spec, RandomStream(6))
        params.filters[...] = 0.7
        params.visible_bias[...] = -0.2
        h = np.ones((1, 3, 3))
        expected = float(sigmoid(np.array(0.7 - 0.2)))
        np.testing.assert_allclose(visible_prob(h, params), expected, atol=1e-7)

    def test_hidden_visible_adjoint_consistency(self):
        # the linear parts of the two conditionals share one filter bank
        spec = small_spec()
        params = init_crbm_params(spec, RandomStream(7), scale=0.3)
        stream = RandomStream(8)
        v = stream.normal((1, 1, 12, 12))
        h = stream.normal((1, 4, 8, 8))
        from capsdbn.numerics import conv2d_full_batch, conv2d_valid_batch
        lhs = float(np.sum(conv2d_valid_batch(v, params.filters) * h))
        rhs = float(np.sum(v * conv2d_full_batch(h, params.filters)))
        assert abs(lhs - rhs) <= 1e-5 * max(1.0, abs(lhs))

    def test_shape_mismatch_rejected(self):
        params = init_crbm_params(small_spec(), RandomStream(9))
        with pytest.raises(ConfigurationError):
            hidden_prob(np.zeros((2, 12, 12)), params)
        with pytest.raises(ConfigurationError):
            visible_prob(np.zeros((3, 8, 8)), params)


class TestSampleBernoulli:
    def test_degenerate_probabilities(self):
        stream = RandomStream(10)
        assert not sample_bernoulli(np.zeros((5, 5)), stream).any()
        assert sample_bernoulli(np.ones((5, 5)), stream).all()

    def test_sample_mean_converges(self):
        stream = RandomStream(11)
        draws = sample_bernoulli(np.full(100_000, 0.5), stream)
        assert abs(draws.mean() - 0.5) < 0.01

    def test_fixed_seed_identical(self):
        p = RandomStream(12).uniform((6, 6))
        a = sample_bernoulli(p, RandomStream(13))
        b = sample_bernoulli(p, RandomStream(13))
        np.testing.assert_array_equal(a, b)

    def test_out_of_range_rejected(self):
        with pytest.raises(NumericError):
            sample_bernoulli(np.array([1.5]), RandomStream(14))


class TestMaxPool:
    def test_constant_input(self):
        out = max_pool(np.full((2, 4, 4), 0.3), 2)
        np.testing.assert_array_equal(out, np.full((2, 2, 2), 0.3))

    def test_hand_case(self):
        h = np.array([[[1, 2, 5, 0], [3, 4, 1, 1], [0, 0, 9, 8], [0, 0, 7, 6]]],
                     dtype=np.float64)
        np.testing.assert_array_equal(max_pool(h, 2), [[[4, 5], [0, 9]]])

    def test_extent_shrinks_by_window(self):
        assert max_pool(np.zeros((3, 8, 8)), 2).shape == (3, 4, 4)

    def test_non_divisible_rejected(self):
        with pytest.raises(ConfigurationError):
            max_pool(np.zeros((1, 5, 5)), 2)

    def test_block_maxima_exact(self):
        rng = np.random.default_rng(15)
        h = rng.random((2, 6, 6))
        out = max_pool(h, 3)
        assert out.max() <= h.max()
        for g in range(2):
            for i in range(2):
                for j in range(2):
                    block = h[g, 3 * i:3 * i + 3, 3 * j:3 * j + 3]
                    assert out[g, i, j] == block.max()


class TestCdStep:
    def test_zero_learning_rate_is_identity(self):
        spec = small_spec()
        params = init_crbm_params(spec, RandomStream(16))
        before = params.copy()
        data = two_pattern_dataset(n_per_pattern=5)
        cfg = DbnTrainCfg(learning_rate=0.0)
        cd_step(data, params, cfg, RandomStream(17))
        assert np.array_equal(params.filters, before.filters)
        assert np.array_equal(params.hidden_bias, before.hidden_bias)
        assert np.array_equal(params.visible_bias, before.visible_bias)

    def test_identical_phases_reduce_to_pure_decay(self):
        spec = small_spec()
        params = init_crbm_params(spec, RandomStream(18), scale=0.2)
        filters_before = params.filters.copy()
        cfg = DbnTrainCfg(learning_rate=0.1, weight_decay=0.5)
        stats = {"pairs": np.ones_like(params.filters, dtype=np.float64),
                 "hidden": np.ones(4), "visible": np.ones(1)}
        apply_cd_update(params, stats, stats, batch_size=7, cfg=cfg)
        expected = filters_before + (-0.1 * 0.5 * filters_before).astype(np.float32)
        np.testing.assert_array_equal(params.filters, expected)

    def test_empty_batch_rejected(self):
        params = init_crbm_params(small_spec(), RandomStream(19))
        with pytest.raises(UsageError):
            cd_step([], params, DbnTrainCfg(), RandomStream(20))

    def test_reconstruction_error_halves_on_two_pattern_data(self):
        spec = small_spec()
        params = init_crbm_params(spec, RandomStream(21))
        data = two_pattern_dataset()
        cfg = DbnTrainCfg(learning_rate=0.05, mini_batch_size=20)
        stream = RandomStream(22)
        epoch_errors = []
        for _epoch in range(200):
            order = stream.permutation(data.shape[0])
            total = 0.0
            for start in range(0, data.shape[0], cfg.mini_batch_size):
                idx = order[start:start + cfg.mini_batch_size]
                _, err = cd_step(data[idx], params, cfg, stream)
                total += err * len(idx)
            epoch_errors.append(total / data.shape[0])
        assert epoch_errors[-1] <= 0.5 * epoch_errors[0], (
            f"error went {epoch_errors[0]:.4f} -> {epoch_errors[-1]:.4f}")


class TestPretrainGreedy:
    def layer_specs(self):
        l1 = small_spec()                                     # 12 -> 8 -> 4
        l2 = CrbmSpec(visible_extent=4, visible_channels=4, groups=6,
                      filter_extent=3, pool_window=2)         # 4 -> 2 -> 1
        return [l1, l2]

    def test_zero_epochs_returns_initialization(self):
        data = two_pattern_dataset(n_per_pattern=4)
        cfg = DbnTrainCfg(epochs_per_layer=0, seed=99)
        stack, traces = pretrain_greedy(data, self.layer_specs(), cfg)
        root = RandomStream(99)
        for li, (spec, params) in enumerate(stack.layers):
            fresh = init_crbm_params(spec, root.child(li))
            assert np.array_equal(params.filters, fresh.filters)
        assert traces == [[], []]

    def test_chain_extents_propagate(self):
        data = two_pattern_dataset(n_per_pattern=4)
        cfg = DbnTrainCfg(epochs_per_layer=1, seed=3)
        stack, _ = pretrain_greedy(data, self.layer_specs(), cfg)
        l1, l2 = stack.layers[0][0], stack.layers[1][0]
        assert l2.visible_extent == l1.pool_extent
        assert l2.visible_channels == l1.groups

    def test_mismatched_first_layer_rejected(self):
        data = two_pattern_dataset(n_per_pattern=2)
        bad = CrbmSpec(visible_extent=10, visible_channels=1, groups=2,
                       filter_extent=3, pool_window=2)
        with pytest.raises(ConfigurationError):
            pretrain_greedy(data, [bad], DbnTrainCfg(epochs_per_layer=1))

    def test_error_trend_decreases(self):
        data = two_pattern_dataset()
        cfg = DbnTrainCfg(learning_rate=0.05, epochs_per_layer=40, seed=5)
        _, traces = pretrain_greedy(data, [small_spec()], cfg)
        first = float(np.median(traces[0][:10]))
        last = float(np.median(traces[0][-10:]))
        assert last < first


class TestExtractFeatures:
    def make_stack(self):
        specs = [small_spec(),
                 CrbmSpec(visible_extent=4, visible_channels=4, groups=6,
                          filter_extent=3, pool_window=2)]
        stream = RandomStream(30)
        layers = [(s, init_crbm_params(s, stream.child(i))) for i, s in enumerate(specs)]
        return DbnStack(layers=layers)

    def test_zero_parameter_stack_gives_half(self):
        stack = self.make_stack()
        for _, params in stack.layers:
            params.filters[...] = 0.0
        feats = extract_features(np.zeros((1, 12, 12), dtype=np.float32), stack)
        np.testing.assert_array_equal(feats, np.full(6, 0.5))

    def test_feature_length_and_range(self):
        stack = self.make_stack()
        x = RandomStream(31).uniform((1, 12, 12))
        feats = extract_features(x, stack)
        assert feats.shape == (stack.feature_length,)
        assert stack.feature_length == 6 * 1 * 1
        assert np.all(feats > 0) and np.all(feats < 1)

    def test_deterministic(self):
        stack = self.make_stack()
        x = RandomStream(32).uniform((4, 1, 12, 12))
        np.testing.assert_array_equal(extract_features(x, stack),
                                      extract_features(x, stack))

    def test_shape_mismatch_rejected(self):
        stack = self.make_stack()
        with pytest.raises(ConfigurationError):
            extract_features(np.zeros((2, 12, 12)), stack)


class TestDbnFeatureExtractor:
    def test_fit_transform_shapes(self):
        data = two_pattern_dataset(n_per_pattern=6)
        extractor = DbnFeatureExtractor(layers=((4, 5, 2), (6, 3, 2)),
                                        epochs_per_layer=2, mini_batch_size=6, seed=7)
        feats = extractor.fit(data).transform(data)
        assert feats.shape == (12, extractor.stack_.feature_length)

    def test_unfitted_transform_rejected(self):
        with pytest.raises(UsageError):
            DbnFeatureExtractor().transform(np.zeros((1, 1, 12, 12)))

    def test_get_params(self):
        ex = DbnFeatureExtractor(learning_rate=0.1, seed=2)
        params = ex.get_params()
        assert params["learning_rate"] == 0.1 and params["seed"] == 2
