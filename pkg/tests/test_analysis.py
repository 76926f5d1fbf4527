"""Rate-identity verification, correlation, and accuracy-curve tests."""

from types import SimpleNamespace

import numpy as np
import pytest

from snnforge import analysis, ann, netio, snnsim
from snnforge.errors import WrongResetMode


def random_dense_net(seed, widths=(5, 7, 4), input_dim=6, scale=0.5):
    rng = np.random.default_rng(seed)
    layers = []
    fan_in = input_dim
    for w in widths:
        layers.append(
            netio.LayerSpec(kind="dense",
                            weight=rng.normal(0, scale / np.sqrt(fan_in), (w, fan_in)),
                            bias=rng.normal(0, 0.1, w))
        )
        layers.append(netio.LayerSpec(kind="relu"))
        fan_in = w
    return netio.NetworkSpec(layers=tuple(layers), input_shape=(input_dim,))


def random_conv_net(seed):
    rng = np.random.default_rng(seed)
    return netio.NetworkSpec(
        layers=(
            netio.LayerSpec(kind="conv2d", weight=rng.normal(0, 0.3, (3, 1, 3, 3)),
                            bias=rng.normal(0, 0.1, 3), stride=(1, 1), padding="same"),
            netio.LayerSpec(kind="relu"),
            netio.LayerSpec(kind="maxpool", window=(2, 2), stride=(2, 2)),
            netio.LayerSpec(kind="flatten"),
            netio.LayerSpec(kind="dense", weight=rng.normal(0, 0.2, (4, 3 * 9)),
                            bias=rng.normal(0, 0.1, 4)),
            netio.LayerSpec(kind="relu"),
        ),
        input_shape=(1, 6, 6),
    )


class TestVerifyRateIdentity:
    @pytest.mark.parametrize("mode", ["analog_current", "poisson"])
    def test_dense_chain_residual_tiny(self, mode):
        rng = np.random.default_rng(42)
        cfg = snnsim.SimConfig(n_steps=200, input_mode=mode,
                               reset_mode="by_subtraction")
        for seed in range(5):
            net = random_dense_net(seed)
            x = rng.uniform(0, 1, 6)
            trace = snnsim.simulate(net, x, cfg)
            report = analysis.verify_rate_identity(trace, net, cfg)
            assert report.max_residual <= 1e-9
            assert len(report.layer_residuals) == 3

    @pytest.mark.parametrize("mode", ["analog_current", "poisson"])
    def test_conv_net_with_pool_residual_tiny(self, mode):
        rng = np.random.default_rng(7)
        cfg = snnsim.SimConfig(n_steps=150, input_mode=mode)
        net = random_conv_net(0)
        trace = snnsim.simulate(net, rng.uniform(0, 1, (1, 6, 6)), cfg)
        report = analysis.verify_rate_identity(trace, net, cfg)
        assert report.max_residual <= 1e-9

    def test_avgpool_layer_included(self):
        rng = np.random.default_rng(9)
        net = netio.NetworkSpec(
            layers=(
                netio.LayerSpec(kind="conv2d", weight=rng.normal(0, 0.3, (2, 1, 3, 3)),
                                bias=rng.normal(0, 0.1, 2), stride=(1, 1),
                                padding="same"),
                netio.LayerSpec(kind="relu"),
                netio.LayerSpec(kind="avgpool", window=(2, 2), stride=(2, 2)),
            ),
            input_shape=(1, 6, 6),
        )
        cfg = snnsim.SimConfig(n_steps=150)
        trace = snnsim.simulate(net, rng.uniform(0, 1, (1, 6, 6)), cfg)
        report = analysis.verify_rate_identity(trace, net, cfg)
        assert 2 in report.layer_residuals  # the avg-pool spiking layer
        assert report.max_residual <= 1e-9

    def test_wrong_reset_mode(self):
        cfg = snnsim.SimConfig(n_steps=20, reset_mode="to_zero")
        net = random_dense_net(0)
        trace = snnsim.simulate(net, np.full(6, 0.5), cfg)
        with pytest.raises(WrongResetMode):
            analysis.verify_rate_identity(trace, net, cfg)

    def test_expansion_matches_recursion_on_3_layer_nets(self):
        rng = np.random.default_rng(42)
        cfg = snnsim.SimConfig(n_steps=200)
        for seed in range(10):
            net = random_dense_net(seed, widths=(6, 6, 5))
            x = rng.uniform(0, 1, 6)
            trace = snnsim.simulate(net, x, cfg)
            report = analysis.verify_rate_identity(trace, net, cfg)
            assert report.expansion_residual is not None
            assert report.expansion_residual <= 1e-9

    def test_expansion_not_defined_for_poisson_input(self):
        cfg = snnsim.SimConfig(n_steps=50, input_mode="poisson")
        net = random_dense_net(1)
        trace = snnsim.simulate(net, np.full(6, 0.4), cfg)
        report = analysis.verify_rate_identity(trace, net, cfg)
        assert report.expansion_residual is None


class TestPredictRateResetZero:
    def simulate_constant(self, a, n_steps=4620, tau=1.0):
        cfg = snnsim.SimConfig(n_steps=n_steps, reset_mode="to_zero", tau=tau)
        state = snnsim.NeuronLayerState((1,))
        for _ in range(n_steps):
            snnsim.step_neuron(state, np.array([tau * a]), cfg)
        return state.n[0] / (n_steps * cfg.dt)

    def test_a_0p3(self):
        # n=4, eps=0.2: predicted (0.3 - 0.2/4) * r_max = 0.25 * r_max
        pred = analysis.predict_rate_reset_zero(0.3, 1.0, 1e-3)
        np.testing.assert_allclose(pred, 250.0)
        assert pred == self.simulate_constant(0.3, n_steps=4000)

    def test_a_0p5_exact(self):
        # tau/z integer: eps=0, no deficit
        pred = analysis.predict_rate_reset_zero(0.5, 1.0, 1e-3)
        np.testing.assert_allclose(pred, 500.0)
        assert pred == self.simulate_constant(0.5, n_steps=4000)

    def test_a_0p9(self):
        # n=2, eps=0.8: (0.9 - 0.8/2) * r_max = 0.5 * r_max
        pred = analysis.predict_rate_reset_zero(0.9, 1.0, 1e-3)
        np.testing.assert_allclose(pred, 500.0)
        assert pred == self.simulate_constant(0.9, n_steps=4000)

    def test_out_of_range(self):
        for a in (0.0, -0.2, 1.0, 1.5):
            with pytest.raises(ValueError):
                analysis.predict_rate_reset_zero(a, 1.0, 1e-3)


class TestPearson:
    def test_identical_vectors(self):
        x = np.random.default_rng(42).normal(size=50)
        r, reason = analysis.pearson(x, x)
        assert reason is None
        np.testing.assert_allclose(r, 1.0)

    def test_negated_vectors(self):
        x = np.random.default_rng(42).normal(size=50)
        r, _ = analysis.pearson(x, -x)
        np.testing.assert_allclose(r, -1.0)

    def test_constant_vector_undefined(self):
        r, reason = analysis.pearson(np.ones(10), np.arange(10.0))
        assert r is None
        assert reason == "zero variance"

    def test_affine_invariance(self):
        rng = np.random.default_rng(42)
        x = rng.normal(size=40)
        y = rng.normal(size=40)
        base, _ = analysis.pearson(x, y)
        for a, b in [(2.0, 1.0), (0.1, -5.0), (7.3, 0.0)]:
            r, _ = analysis.pearson(x, a * y + b)
            np.testing.assert_allclose(r, base, atol=1e-12)
            r_neg, _ = analysis.pearson(x, -a * y + b)
            np.testing.assert_allclose(r_neg, -base, atol=1e-12)

    def test_symmetry(self):
        rng = np.random.default_rng(42)
        x, y = rng.normal(size=(2, 30))
        rxy, _ = analysis.pearson(x, y)
        ryx, _ = analysis.pearson(y, x)
        np.testing.assert_allclose(rxy, ryx)


class TestCorrelate:
    def test_first_layer_long_run_correlation_near_one(self):
        rng = np.random.default_rng(42)
        net = random_dense_net(3, widths=(8,), input_dim=6)
        x = rng.uniform(0, 1, 6)
        cfg = snnsim.SimConfig(n_steps=3000)
        trace = snnsim.simulate(net, x, cfg)
        record = ann.forward(net, x)
        result = analysis.correlate(trace, record)
        assert result[0]["r"] >= 0.99

    def test_lambda_rescaling_applied(self):
        rng = np.random.default_rng(1)
        net = random_dense_net(4, widths=(8,), input_dim=6)
        x = rng.uniform(0, 1, 6)
        cfg = snnsim.SimConfig(n_steps=500)
        trace = snnsim.simulate(net, x, cfg)
        record = ann.forward(net, x)
        with_lam = analysis.correlate(trace, record, lambdas={1: 2.0})
        raw = analysis.correlate(trace, record, raw=True)
        # positive rescaling leaves Pearson unchanged
        np.testing.assert_allclose(with_lam[0]["r"], raw[0]["r"], atol=1e-12)

    def test_dead_sample_reports_reason(self):
        net = random_dense_net(5, widths=(4,), input_dim=6)
        cfg = snnsim.SimConfig(n_steps=30)
        trace = snnsim.simulate(net, np.zeros(6), cfg)
        record = ann.forward(net, np.zeros(6))
        result = analysis.correlate(trace, record)
        entry = result[0]
        assert entry["r"] is None or abs(entry["r"]) <= 1.0


def labeled_data_for(net, n, seed=0):
    """Synthetic dataset whose labels are the network's own predictions."""
    rng = np.random.default_rng(seed)
    images = rng.uniform(0, 1, size=(n,) + net.input_shape)
    labels = np.argmax(ann.forward(net, images).output, axis=1)
    return SimpleNamespace(images=images, labels=labels)


class TestAccuracyCurve:
    def make_net(self):
        rng = np.random.default_rng(11)
        return netio.NetworkSpec(
            layers=(
                netio.LayerSpec(kind="dense", weight=rng.normal(0, 0.4, (8, 6)),
                                bias=rng.normal(0, 0.1, 8)),
                netio.LayerSpec(kind="relu"),
                netio.LayerSpec(kind="dense", weight=rng.normal(0, 0.4, (3, 8)),
                                bias=rng.normal(0, 0.1, 3)),
                netio.LayerSpec(kind="softmax"),
            ),
            input_shape=(6,),
        )

    def test_checkpoint_zero_is_chance_via_class_zero(self):
        net = self.make_net()
        data = labeled_data_for(net, 30)
        cfg = snnsim.SimConfig(n_steps=5)
        curve = analysis.accuracy_curve(net, cfg, data, checkpoints=[0, 5],
                                        n_samples=30)
        # with no evidence every sample falls back to class 0
        chance = (data.labels == 0).mean()
        np.testing.assert_allclose(curve.accuracies[0], chance)

    def test_accuracy_improves_with_steps(self):
        net = self.make_net()
        data = labeled_data_for(net, 40)
        cfg = snnsim.SimConfig(n_steps=200)
        curve = analysis.accuracy_curve(net, cfg, data, checkpoints=[5, 200],
                                        n_samples=40)
        assert curve.accuracies[-1] >= curve.accuracies[0]
        assert curve.accuracies[-1] >= 0.9  # labels are the ANN's own argmax

    def test_checkpoints_must_increase(self):
        net = self.make_net()
        data = labeled_data_for(net, 5)
        with pytest.raises(ValueError):
            analysis.accuracy_curve(net, snnsim.SimConfig(), data,
                                    checkpoints=[10, 10], n_samples=5)

    def test_csv_format(self, tmp_path):
        net = self.make_net()
        data = labeled_data_for(net, 10)
        cfg = snnsim.SimConfig(n_steps=20)
        curve = analysis.accuracy_curve(net, cfg, data, checkpoints=[1, 20],
                                        n_samples=10)
        path = tmp_path / "curve.csv"
        curve.to_csv(path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "step,accuracy"
        assert len(lines) == 3
        step, acc = lines[1].split(",")
        assert int(step) == 1 and 0.0 <= float(acc) <= 1.0

    def test_workers_do_not_change_results(self):
        net = self.make_net()
        data = labeled_data_for(net, 24)
        cfg = snnsim.SimConfig(n_steps=30)
        kwargs = dict(checkpoints=[5, 30], n_samples=24, chunk_size=7)
        a = analysis.accuracy_curve(net, cfg, data, workers=1, **kwargs)
        b = analysis.accuracy_curve(net, cfg, data, workers=3, **kwargs)
        assert a.accuracies == b.accuracies
