"""Batch-norm folding, activation statistics and normalization tests."""

from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from snnforge import ann, convert, netio
from snnforge.errors import DeadLayer, UnsupportedLayer


def dense_bn_net(w, b, mean, std, gamma, beta):
    return netio.NetworkSpec(
        layers=(
            netio.LayerSpec(kind="dense", weight=np.atleast_2d(w), bias=np.atleast_1d(b)),
            netio.LayerSpec(
                kind="batchnorm",
                mean=np.atleast_1d(mean),
                std=np.atleast_1d(std),
                gamma=np.atleast_1d(gamma),
                beta=np.atleast_1d(beta),
            ),
            netio.LayerSpec(kind="relu"),
        ),
        input_shape=(1,),
    )


def random_conv_bn_net(seed):
    rng = np.random.default_rng(seed)
    return netio.NetworkSpec(
        layers=(
            netio.LayerSpec(kind="conv2d", weight=rng.normal(size=(4, 2, 3, 3)),
                            bias=rng.normal(size=4), stride=(1, 1), padding="same"),
            netio.LayerSpec(kind="batchnorm", mean=rng.normal(size=4),
                            std=rng.uniform(0.3, 2.0, size=4),
                            gamma=rng.normal(0.0, 1.0, size=4) + 1.5,
                            beta=rng.normal(size=4)),
            netio.LayerSpec(kind="relu"),
            netio.LayerSpec(kind="flatten"),
            netio.LayerSpec(kind="dense", weight=rng.normal(size=(3, 4 * 25)),
                            bias=rng.normal(size=3)),
            netio.LayerSpec(kind="batchnorm", mean=rng.normal(size=3),
                            std=rng.uniform(0.3, 2.0, size=3),
                            gamma=rng.normal(0.0, 1.0, size=3) + 1.5,
                            beta=rng.normal(size=3)),
            netio.LayerSpec(kind="relu"),
        ),
        input_shape=(2, 5, 5),
    )


class TestFoldBatchnorm:
    def test_identity_bn_removed_weights_unchanged(self):
        net = dense_bn_net([[3.0]], [1.0], 0.0, 1.0, 1.0, 0.0)
        folded = convert.fold_batchnorm(net)
        kinds = [l.kind for l in folded.layers]
        assert "batchnorm" not in kinds
        np.testing.assert_array_equal(folded.layers[0].weight, [[3.0]])
        np.testing.assert_array_equal(folded.layers[0].bias, [1.0])

    def test_hand_computed_fold(self):
        net = dense_bn_net([[3.0]], [1.0], 1.0, 4.0, 2.0, 0.5)
        folded = convert.fold_batchnorm(net)
        np.testing.assert_allclose(folded.layers[0].weight, [[1.5]])
        np.testing.assert_allclose(folded.layers[0].bias, [0.5])

    def test_equivalence_oracle_100_random_inputs(self):
        rng = np.random.default_rng(42)
        for seed in range(3):
            net = random_conv_bn_net(seed)
            folded = convert.fold_batchnorm(net)
            for _ in range(100):
                x = rng.uniform(0, 1, size=(2, 5, 5))
                want = ann.forward(net, x).output
                got = ann.forward(folded, x).output
                scale = max(np.abs(want).max(), 1e-12)
                assert np.abs(got - want).max() / scale < 1e-5

    def test_bn_without_predecessor(self):
        with pytest.raises(UnsupportedLayer):
            convert.fold_batchnorm(
                netio.NetworkSpec(
                    layers=(
                        netio.LayerSpec(kind="relu"),
                        netio.LayerSpec(kind="batchnorm", mean=np.zeros(1),
                                        std=np.ones(1), gamma=np.ones(1),
                                        beta=np.zeros(1)),
                    ),
                    input_shape=(1,),
                )
            )

    def test_fold_records_meta(self):
        folded = convert.fold_batchnorm(random_conv_bn_net(0))
        assert folded.meta["bn_folded"] is True
        assert folded.meta["fold_log"] == [1, 5]


def identity_relu_net(width=1):
    return netio.NetworkSpec(
        layers=(
            netio.LayerSpec(kind="dense", weight=np.eye(width), bias=np.zeros(width)),
            netio.LayerSpec(kind="relu"),
        ),
        input_shape=(width,),
    )


class TestCollectStats:
    def test_single_observation(self):
        net = identity_relu_net()
        data = SimpleNamespace(images=np.array([[0.7]]), labels=np.array([0]))
        stats = convert.collect_stats(net, data, 1)
        np.testing.assert_array_equal(stats.values[1], [0.7])
        assert stats.counts[1] == 1
        assert stats.maxima[1] == 0.7

    def test_multiset_union(self):
        net = identity_relu_net(width=2)
        data = SimpleNamespace(
            images=np.array([[1.0, 2.0], [3.0, 4.0]]) / 4.0, labels=np.array([0, 0])
        )
        stats = convert.collect_stats(net, data, 2)
        np.testing.assert_array_equal(stats.values[1], [0.25, 0.5, 0.75, 1.0])
        assert stats.counts[1] == 4

    def test_counts_equal_units_times_samples(self):
        rng = np.random.default_rng(42)
        net = netio.NetworkSpec(
            layers=(
                netio.LayerSpec(kind="dense", weight=rng.normal(size=(6, 3)),
                                bias=rng.normal(size=6)),
                netio.LayerSpec(kind="relu"),
            ),
            input_shape=(3,),
        )
        data = SimpleNamespace(images=rng.uniform(0, 1, size=(17, 3)), labels=None)
        stats = convert.collect_stats(net, data, 17)
        assert stats.counts[1] == 6 * 17
        assert stats.values[1].size == 6 * 17
        assert np.all(stats.values[1] >= 0)
        assert np.all(np.diff(stats.values[1]) >= 0)  # sorted

    def test_empty_dataset(self):
        net = identity_relu_net()
        data = SimpleNamespace(images=np.empty((0, 1)), labels=None)
        with pytest.raises(ValueError):
            convert.collect_stats(net, data, 1)

    def test_reservoir_keeps_exact_max_and_count(self):
        rng = np.random.default_rng(42)
        net = identity_relu_net(width=4)
        data = SimpleNamespace(images=rng.uniform(0, 1, size=(50, 4)), labels=None)
        full = convert.collect_stats(net, data, 50)
        sub = convert.collect_stats(net, data, 50, reservoir=20, seed=1)
        assert sub.counts[1] == full.counts[1] == 200
        assert sub.maxima[1] == full.maxima[1]
        assert sub.values[1].size == 20

    def test_json_round_trip(self):
        net = identity_relu_net(width=2)
        data = SimpleNamespace(images=np.array([[0.1, 0.9]]), labels=None)
        stats = convert.collect_stats(net, data, 1)
        back = convert.ActivationStats.from_json(stats.to_json())
        np.testing.assert_array_equal(back.values[1], stats.values[1])
        assert back.counts == stats.counts


class TestPercentileScale:
    def make_stats(self, values):
        values = np.sort(np.asarray(values, dtype=np.float64))
        stats = convert.ActivationStats(n_samples=1, mode="exhaustive")
        stats.values[1] = values
        stats.maxima[1] = float(values.max())
        stats.counts[1] = values.size
        return stats

    def test_p100_is_maximum(self):
        stats = self.make_stats(np.arange(1.0, 101.0))
        assert convert.percentile_scale(stats, 100)[1] == 100.0

    def test_p99_linear_interpolation(self):
        stats = self.make_stats(np.arange(1.0, 101.0))
        lam = convert.percentile_scale(stats, 99)[1]
        np.testing.assert_allclose(lam, 99.01)

    def test_constant_distribution(self):
        stats = self.make_stats(np.full(37, 2.5))
        for p in (1.0, 50.0, 99.9, 100.0):
            np.testing.assert_allclose(convert.percentile_scale(stats, p)[1], 2.5)

    def test_dead_layer(self):
        stats = self.make_stats(np.zeros(10))
        with pytest.raises(DeadLayer):
            convert.percentile_scale(stats, 100)

    def test_zero_percentile_value_is_dead(self):
        # mostly-zero layer: a low percentile lands on zero
        stats = self.make_stats(np.concatenate([np.zeros(90), np.ones(10)]))
        with pytest.raises(DeadLayer):
            convert.percentile_scale(stats, 50)

    @given(
        st.lists(st.floats(0.01, 100.0), min_size=2, max_size=50),
        st.floats(1.0, 100.0),
        st.floats(1.0, 100.0),
    )
    @settings(max_examples=60, deadline=None)
    def test_monotone_in_p(self, values, p1, p2):
        stats = self.make_stats(values)
        lo, hi = sorted((p1, p2))
        assert convert.percentile_scale(stats, lo)[1] <= (
            convert.percentile_scale(stats, hi)[1] + 1e-12
        )


class TestNormalizeParams:
    def test_hand_computed_rescale(self):
        # two dense+relu stages; first scale 2, second scale 4
        net = netio.NetworkSpec(
            layers=(
                netio.LayerSpec(kind="dense", weight=np.array([[5.0]]), bias=np.array([3.0])),
                netio.LayerSpec(kind="relu"),
                netio.LayerSpec(kind="dense", weight=np.array([[1.0]]), bias=np.array([2.0])),
                netio.LayerSpec(kind="relu"),
            ),
            input_shape=(1,),
        )
        normalized, report = convert.normalize_params(net, {1: 2.0, 3: 4.0})
        np.testing.assert_allclose(normalized.layers[0].weight, [[2.5]])
        np.testing.assert_allclose(normalized.layers[0].bias, [1.5])
        np.testing.assert_allclose(normalized.layers[2].weight, [[0.5]])
        np.testing.assert_allclose(normalized.layers[2].bias, [0.5])
        assert report.rescales[1]["weight_factor"] == 0.5

    def test_unit_scales_change_nothing(self):
        net = random_conv_bn_net(0)
        folded = convert.fold_batchnorm(net)
        unit = {i: 1.0 for i in convert.relu_layer_indices(folded)}
        normalized, _ = convert.normalize_params(folded, unit)
        for a, b in zip(folded.layers, normalized.layers):
            if a.weight is not None:
                np.testing.assert_array_equal(a.weight, b.weight)
                np.testing.assert_array_equal(a.bias, b.bias)

    def test_nonpositive_scale_rejected(self):
        net = identity_relu_net()
        with pytest.raises(DeadLayer):
            convert.normalize_params(net, {1: 0.0})

    def test_batchnorm_must_be_folded_first(self):
        net = random_conv_bn_net(0)
        with pytest.raises(UnsupportedLayer):
            convert.normalize_params(net, {2: 1.0, 6: 1.0})

    def _normalization_setup(self, seed):
        rng = np.random.default_rng(seed)
        net = convert.fold_batchnorm(random_conv_bn_net(seed))
        data = SimpleNamespace(
            images=rng.uniform(0, 1, size=(40, 2, 5, 5)), labels=None
        )
        return net, data

    def test_p100_bounds_activations_by_one(self):
        for seed in range(3):
            net, data = self._normalization_setup(seed)
            stats = convert.collect_stats(net, data, 40)
            lambdas = convert.percentile_scale(stats, 100)
            normalized, _ = convert.normalize_params(net, lambdas)
            restats = convert.collect_stats(normalized, data, 40)
            for idx in restats.maxima:
                assert restats.maxima[idx] <= 1.0 + 1e-9

    def test_argmax_preserved_on_every_sample(self):
        for seed in range(3):
            net, data = self._normalization_setup(seed)
            stats = convert.collect_stats(net, data, 40)
            lambdas = convert.percentile_scale(stats, 99.0)
            normalized, _ = convert.normalize_params(net, lambdas)
            batch = data.images
            before = ann.forward(net, batch).output
            after = ann.forward(normalized, batch).output
            np.testing.assert_array_equal(
                np.argmax(before, axis=1), np.argmax(after, axis=1)
            )

    def test_report_json_round_trip(self):
        net, data = self._normalization_setup(0)
        stats = convert.collect_stats(net, data, 10)
        lambdas = convert.percentile_scale(stats, 99.9)
        _, report = convert.normalize_params(net, lambdas, percentile=99.9)
        back = convert.ConversionReport.from_json(report.to_json())
        assert back.lambdas == report.lambdas
        assert back.percentile == 99.9
