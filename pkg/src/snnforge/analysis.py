"""Numerical verification of the rate identities, ANN/SNN correlation,
and accuracy-latency curves.

Under reset-by-subtraction the membrane recurrence telescopes into an exact
per-layer identity

    r_l = W_l @ r_{l-1} + r_max * b_l - V_l(T) / (tau * D),

with D the total simulated duration.  ``verify_rate_identity`` evaluates its
residual from a recorded trace; the layer-recursive expansion (substituting
the identity into itself down to the analog input) is checked against the
recursion as two independent evaluations of the same quantity.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import ann, snnsim
from .errors import WrongResetMode
from .netio import NetworkSpec


@dataclass
class TheoryReport:
    """Residuals of the exact-rate identities measured on one trace."""

    reset_mode: str
    layer_residuals: dict = field(default_factory=dict)  # spec idx -> max |residual|
    max_residual: float = 0.0
    expansion_residual: float | None = None

    def to_json(self):
        return {
            "reset_mode": self.reset_mode,
            "layer_residuals": {str(k): v for k, v in self.layer_residuals.items()},
            "max_residual": self.max_residual,
            "expansion_residual": self.expansion_residual,
        }


def _linear_map(layer, rates_in, shape_in):
    """W @ r + r_max * b term of the identity, reusing the forward kernels."""
    r = np.asarray(rates_in, dtype=np.float64).reshape(shape_in)
    if layer.kind == "conv2d":
        return ann.conv2d(r, layer.weight, None, layer.stride, layer.padding)
    return ann.dense(r, layer.weight, None)


def verify_rate_identity(
    trace: snnsim.SimTrace, net: NetworkSpec, config: snnsim.SimConfig
) -> TheoryReport:
    """Check the per-layer rate identity on every conv/dense layer of a
    reset-by-subtraction trace; raises WrongResetMode for reset-to-zero
    traces, where the identity does not hold."""
    if config.reset_mode != "by_subtraction":
        raise WrongResetMode("the rate identity requires reset-by-subtraction")
    d = config.duration
    tau = config.tau
    r_max = config.r_max
    report = TheoryReport(reset_mode=config.reset_mode)

    # Presynaptic rates feeding the first layer (None when the first layer
    # runs on constant analog currents and is checked by its own identity).
    prev_rates = trace.input_counts / d if trace.input_mode == "poisson" else None
    for entry in trace.layers:
        layer = net.layers[entry.spec_index]
        if entry.kind == "if" and layer.kind in ("conv2d", "dense"):
            if prev_rates is None:
                lin = ann.apply_layer(layer, trace.input_values)
                predicted = lin * r_max - entry.v_final / (tau * d)
            else:
                wr = _linear_map(layer, prev_rates, prev_rates.shape)
                predicted = (
                    wr + r_max * _bias_field(layer, wr.shape)
                    - entry.v_final / (tau * d)
                )
            residual = float(np.abs(entry.counts / d - predicted).max())
            report.layer_residuals[entry.spec_index] = residual
        elif entry.kind == "avgpool" and prev_rates is not None:
            # fixed-weight spiking layer: r = avg-pool(r_prev) - V/(tau*D)
            predicted = ann.pool(
                prev_rates, "avg", layer.window, layer.stride
            ) - entry.v_final / (tau * d)
            residual = float(np.abs(entry.counts / d - predicted).max())
            report.layer_residuals[entry.spec_index] = residual
        if entry.kind != "softmax_head":
            prev_rates = entry.counts / d
    if report.layer_residuals:
        report.max_residual = max(report.layer_residuals.values())
    report.expansion_residual = _expansion_residual(trace, net, config)
    return report


def _bias_field(layer, shape):
    b = layer.bias
    if layer.kind == "conv2d":
        return np.broadcast_to(b[:, None, None], shape)
    return b


def _expansion_residual(trace, net, config):
    """Compare the fully expanded rate formula against the layer recursion.

    Only defined for analog input on a pure conv/dense (+relu) chain; returns
    None otherwise.  Both evaluations consume the measured final membranes,
    so they must agree to float precision.
    """
    if trace.input_mode != "analog_current" or trace.input_values is None:
        return None
    if any(t.kind != "if" for t in trace.layers):
        return None

    d = config.duration
    tau = config.tau
    r_max = config.r_max
    delta_v = [t.v_final / (tau * d) for t in trace.layers]
    layers = [net.layers[t.spec_index] for t in trace.layers]

    # Evaluation 1: recursion seeded by the first-layer constant-input identity.
    lin = ann.apply_layer(layers[0], trace.input_values)
    r = lin * r_max - delta_v[0]
    for layer, dv in zip(layers[1:], delta_v[1:]):
        wr = _linear_map(layer, r, r.shape)
        r = wr + r_max * _bias_field(layer, wr.shape) - dv

    # Evaluation 2: closed form; the no-rectifier composition of the layers
    # times r_max, minus the weight-propagated membrane corrections.
    a = trace.input_values
    for layer in layers:
        a = ann.apply_layer(layer, a)
    expanded = a * r_max
    for k in range(len(layers)):
        term = delta_v[k]
        for layer in layers[k + 1 :]:
            term = _linear_map(layer, term, term.shape)
        expanded = expanded - term

    return float(np.abs(r - expanded).max())


def predict_rate_reset_zero(a: float, tau: float, dt: float) -> float:
    """Predicted reset-to-zero firing rate for constant input z = tau * a.

    The interspike period n is the first step at which the accumulated input
    reaches the threshold (evaluated on the same floating-point grid as the
    simulator, which matches ceil(tau/z) except when repeated addition lands
    an ulp short); the overshoot eps = n*z - tau then gives the systematic
    rate deficit r_max * eps / (n * tau).
    """
    if not 0 < a < 1:
        raise ValueError(f"constant input fraction must be in (0,1), got {a}")
    z = tau * a
    n = 0
    v = 0.0
    while v < tau:
        v += z
        n += 1
    eps = n * z - tau
    return (a - eps / (n * tau)) / dt


def pearson(x, y):
    """Pearson correlation, or None (with a reason) for degenerate inputs."""
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.size != y.size:
        raise ValueError("mismatched lengths")
    if x.size < 2:
        return None, "fewer than two observations"
    xc = x - x.mean()
    yc = y - y.mean()
    nx = math.sqrt(float(xc @ xc))
    ny = math.sqrt(float(yc @ yc))
    if nx == 0 or ny == 0:
        return None, "zero variance"
    return float(xc @ yc / (nx * ny)), None


def correlate(
    trace: snnsim.SimTrace,
    record: ann.ActivationRecord,
    lambdas: dict | None = None,
    raw: bool = False,
):
    """Per-layer Pearson correlation between firing rates (as a fraction of
    r_max) and the matching post-ReLU activations.

    ``record`` comes from the un-normalized network; ``lambdas`` maps relu
    layer indices to their normalization scale so activations are compared
    post-normalization.  Pass ``raw=True`` (or no lambdas) to compare raw
    activations instead.
    """
    config = trace.config
    results = {}
    for entry in trace.layers:
        if entry.kind != "if":
            continue
        relu_idx = entry.relu_index
        if relu_idx is not None:
            act = np.asarray(record.activations[relu_idx], dtype=np.float64).ravel()
        else:  # bare IF layer: its rate approximates the rectified linear output
            act = np.maximum(
                np.asarray(record.activations[entry.spec_index]), 0.0
            ).ravel()
            relu_idx = entry.spec_index
        if not raw and lambdas and relu_idx in lambdas:
            act = act / lambdas[relu_idx]
        rate_frac = entry.counts.ravel() / (config.duration * config.r_max)
        r, reason = pearson(rate_frac, act)
        results[entry.spec_index] = {"r": r, "reason": reason, "relu_index": relu_idx}
    return results


@dataclass
class AccuracyCurve:
    """Accuracy as a function of accumulated simulation steps."""

    steps: list
    accuracies: list
    n_samples: int
    config: snnsim.SimConfig

    def to_csv(self, path):
        with open(path, "w") as f:
            f.write("step,accuracy\n")
            for s, a in zip(self.steps, self.accuracies):
                f.write(f"{s},{a:.6f}\n")

    def to_json(self):
        return {
            "steps": list(self.steps),
            "accuracies": [float(a) for a in self.accuracies],
            "n_samples": self.n_samples,
            "config": self.config.to_json(),
        }


DEFAULT_CHECKPOINTS = (1, 2, 5, 10, 20, 50, 100, 200, 300)


def accuracy_curve(
    net: NetworkSpec,
    config: snnsim.SimConfig,
    data,
    checkpoints=DEFAULT_CHECKPOINTS,
    n_samples: int | None = None,
    chunk_size: int = 100,
    workers: int = 1,
) -> AccuracyCurve:
    """Classification accuracy at each checkpoint, from a single simulation
    of ``max(checkpoints)`` steps per sample."""
    checkpoints = [int(c) for c in checkpoints]
    if any(b <= a for a, b in zip(checkpoints, checkpoints[1:])):
        raise ValueError("checkpoints must be strictly increasing")
    if len(data.images) == 0:
        raise ValueError("empty dataset")
    n = len(data.images) if n_samples is None else min(n_samples, len(data.images))
    if max(checkpoints) > config.n_steps:
        config = snnsim.SimConfig(**{**config.to_json(), "n_steps": max(checkpoints)})

    predictions = np.empty((len(checkpoints), n), dtype=np.int64)
    for start, traces in _run_chunks(net, config, data, n, chunk_size, workers):
        for j, trace in enumerate(traces):
            for ci, c in enumerate(checkpoints):
                predictions[ci, start + j] = snnsim.classify(trace, step=c)
    labels = data.labels[:n]
    accuracies = [(predictions[ci] == labels).mean() for ci in range(len(checkpoints))]
    return AccuracyCurve(
        steps=checkpoints, accuracies=accuracies, n_samples=n, config=config
    )


def _run_chunks(net, config, data, n, chunk_size, workers):
    """Yield (start, traces) per chunk; chunks may run on a thread pool."""
    starts = list(range(0, n, chunk_size))

    def run(start):
        stop = min(start + chunk_size, n)
        batch = data.images[start:stop].reshape((-1,) + net.input_shape)
        return start, snnsim.simulate_batch(
            net, batch, config, sample_indices=range(start, stop)
        )

    if workers <= 1:
        for start in starts:
            yield run(start)
        return
    from concurrent.futures import ThreadPoolExecutor

    with ThreadPoolExecutor(max_workers=workers) as pool:
        for result in pool.map(run, starts):
            yield result


def evaluate_accuracy(net, config, data, n_samples, chunk_size=100, workers=1):
    """SNN accuracy on the first ``n_samples`` inputs at full n_steps."""
    curve = accuracy_curve(
        net,
        config,
        data,
        checkpoints=[config.n_steps],
        n_samples=n_samples,
        chunk_size=chunk_size,
        workers=workers,
    )
    return curve.accuracies[0]
