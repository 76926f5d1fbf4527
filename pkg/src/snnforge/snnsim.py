"""Discrete-time spiking simulator.

Integrate-and-fire neurons driven by input currents z = tau * (W @ spikes + b),
with reset-to-zero or reset-by-subtraction, analog-current or Poisson input
encoding, gated spiking max-pooling, and a Poisson-clocked spiking softmax
output stage.

RNG contract: each sample uses an independent stream seeded from
``(rng_seed, sample_index)``.  Within one simulation the draws are, in order:
the full Poisson input train (if input_mode is "poisson"), the softmax
generator event flags for every step (if the net has a softmax head), then
one uniform per generator event in chronological order.  This makes traces
bit-reproducible regardless of how samples are scheduled.

Internally the engine keeps feature maps channels-last ((B, H, W, C); batched
GEMMs over contiguous rows); traces and every public surface stay
channels-first.  The verifier recomputes currents through the same
convolution kernel, so both sides share float semantics exactly.
"""

import json
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import _kernels, ann
from .errors import ShapeMismatch, UnsupportedLayer
from .netio import NetworkSpec

_kernels_ready = False


def _ensure_kernels():
    global _kernels_ready
    if _kernels.ENABLED and not _kernels_ready:
        _kernels.warmup()
        _kernels_ready = True

RESET_MODES = ("to_zero", "by_subtraction")
INPUT_MODES = ("analog_current", "poisson")


@dataclass(frozen=True)
class SimConfig:
    """Simulation parameters; defaults follow the toolkit conventions
    (threshold 1, 1 ms steps so r_max = 1000 Hz, 300 steps)."""

    tau: float = 1.0
    dt: float = 1e-3
    n_steps: int = 300
    reset_mode: str = "by_subtraction"
    input_mode: str = "analog_current"
    rng_seed: int = 42
    maxpool_gamma: float = 0.999
    softmax_gen_rate: float | None = None  # None means r_max (event every step)
    clamp_negative_v: bool = False

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        if self.reset_mode not in RESET_MODES:
            raise ValueError(f"reset_mode must be one of {RESET_MODES}")
        if self.input_mode not in INPUT_MODES:
            raise ValueError(f"input_mode must be one of {INPUT_MODES}")
        if not 0 < self.maxpool_gamma < 1:
            raise ValueError("maxpool_gamma must be in (0,1)")
        if self.softmax_gen_rate is not None and not (
            0 <= self.softmax_gen_rate <= self.r_max
        ):
            raise ValueError("softmax_gen_rate must be in [0, r_max]")

    @property
    def r_max(self) -> float:
        return 1.0 / self.dt

    @property
    def duration(self) -> float:
        """Total simulated time D = n_steps * dt; rates are N / D."""
        return self.n_steps * self.dt

    @property
    def generator_prob(self) -> float:
        """Per-step probability of a softmax generator event."""
        rate = self.r_max if self.softmax_gen_rate is None else self.softmax_gen_rate
        return min(rate * self.dt, 1.0)

    def to_json(self):
        return {
            "tau": self.tau,
            "dt": self.dt,
            "n_steps": self.n_steps,
            "reset_mode": self.reset_mode,
            "input_mode": self.input_mode,
            "rng_seed": self.rng_seed,
            "maxpool_gamma": self.maxpool_gamma,
            "softmax_gen_rate": self.softmax_gen_rate,
            "clamp_negative_v": self.clamp_negative_v,
        }

    @classmethod
    def from_json(cls, obj):
        return cls(**obj)


# ---------------------------------------------------------------------------
# Spec-level mechanisms
# ---------------------------------------------------------------------------

class NeuronLayerState:
    """Membrane potentials, spike counts and current-step spike indicators."""

    def __init__(self, shape):
        self.v = np.zeros(shape)
        self.n = np.zeros(shape, dtype=np.int64)
        self.theta = np.zeros(shape)


def input_current(layer, presyn, config: SimConfig):
    """Input current z = tau * (W @ presyn + b) for a conv/dense layer.

    ``presyn`` is either binary spike indicators or, for the very first
    hidden layer in analog mode, the static pixel values (channels-first).
    """
    if layer.kind == "conv2d":
        lin = ann.conv2d(presyn, layer.weight, layer.bias, layer.stride, layer.padding)
    elif layer.kind == "dense":
        lin = ann.dense(presyn, layer.weight, layer.bias)
    else:
        raise UnsupportedLayer(f"input_current: layer kind {layer.kind!r}")
    return lin if config.tau == 1.0 else config.tau * lin


def step_neuron(state: NeuronLayerState, z, config: SimConfig):
    """Advance integrate-and-fire neurons one step (in place).

    Spike iff V(t-1) + z(t) >= tau.  Reset-to-zero discards the overshoot;
    reset-by-subtraction keeps it by subtracting tau.
    """
    v = state.v
    v += z
    fired = v >= config.tau
    if config.reset_mode == "to_zero":
        v[fired] = 0.0
    else:
        np.subtract(v, config.tau, out=v, where=fired)
    if config.clamp_negative_v:
        np.maximum(v, 0.0, out=v)
    state.n += fired
    theta = fired.astype(np.float64)
    state.theta = theta
    return state, theta


def encode_poisson(x, rng, config: SimConfig):
    """Bernoulli spike train per step with success probability x (rate x * r_max)."""
    x = np.asarray(x, dtype=np.float64)
    if x.size and (x.min() < 0 or x.max() > 1):
        raise ValueError("pixel intensities must lie in [0,1]")
    return rng.random((config.n_steps,) + x.shape) < x


@dataclass
class MaxPoolGate:
    """EWMA firing-rate estimates controlling a spiking max-pool gate."""

    window: tuple
    stride: tuple
    rho: np.ndarray

    @classmethod
    def zeros(cls, window, stride, shape):
        return cls(window=tuple(window), stride=tuple(stride), rho=np.zeros(shape))


def _gated_pool(rho, theta, window, stride, axes):
    """Select, per window over ``axes``, the spike of the unit with the
    largest rate estimate (ties: lowest flat window index, row-major)."""
    kh, kw = window
    sh, sw = stride
    ax0, ax1 = axes
    rho_w = sliding_window_view(rho, (kh, kw), axis=axes)
    theta_w = sliding_window_view(theta, (kh, kw), axis=axes)
    slicer = [slice(None)] * rho_w.ndim
    slicer[ax0] = slice(None, None, sh)
    slicer[ax1] = slice(None, None, sw)
    rho_w = rho_w[tuple(slicer)]
    theta_w = theta_w[tuple(slicer)]
    flat_rho = rho_w.reshape(rho_w.shape[:-2] + (kh * kw,))
    flat_theta = theta_w.reshape(theta_w.shape[:-2] + (kh * kw,))
    winner = flat_rho.argmax(axis=-1)
    return np.take_along_axis(flat_theta, winner[..., None], axis=-1)[..., 0]


def spiking_maxpool(presyn_spikes, gate: MaxPoolGate, config: SimConfig):
    """Gate one step of channels-first spikes: update the EWMA estimates,
    then per window pass through the spike of the unit with the largest
    estimate.  The estimate update precedes gating within the step."""
    theta = np.asarray(presyn_spikes, dtype=np.float64)
    g = config.maxpool_gamma
    gate.rho *= g
    gate.rho += (1.0 - g) * theta
    out = _gated_pool(gate.rho, theta, gate.window, gate.stride,
                      axes=(theta.ndim - 2, theta.ndim - 1))
    return out, gate


class SoftmaxOutputState:
    """Accumulated membrane potentials of the softmax output stage."""

    def __init__(self, shape):
        self.v = np.zeros(shape)


def _softmax_rows(v):
    shifted = v - v.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def spiking_softmax(state: SoftmaxOutputState, z, rng, config: SimConfig):
    """One step of the output stage: accumulate input, and on an external
    generator event sample one class spike from softmax(V).

    Returns ``(state, class_id)`` with ``class_id`` None when the generator
    stayed silent this step.
    """
    state.v = state.v + z
    if rng.random() >= config.generator_prob:
        return state, None
    p = _softmax_rows(state.v)
    u = rng.random()
    cls = int(min(np.searchsorted(np.cumsum(p), u, side="right"), p.shape[-1] - 1))
    return state, cls


# ---------------------------------------------------------------------------
# Network lowering (channels-last runtime nodes)
# ---------------------------------------------------------------------------

def _cl_shape(out_shape, batch):
    if len(out_shape) == 3:
        c, h, w = out_shape
        return (batch, h, w, c)
    return (batch,) + tuple(out_shape)


def _to_nchw(arr_cl, out_shape):
    """One sample's channels-last array back to the spec's (C,H,W) layout."""
    if len(out_shape) == 3:
        return np.ascontiguousarray(arr_cl.transpose(2, 0, 1))
    return arr_cl


def _flat_nchw(batch_cl):
    """(B, H, W, C) -> (B, C*H*W) in channels-first flattening order."""
    if batch_cl.ndim == 4:
        return batch_cl.transpose(0, 3, 1, 2).reshape(batch_cl.shape[0], -1)
    return batch_cl.reshape(batch_cl.shape[0], -1)


class _IFNode:
    """Conv/dense neurons with IF dynamics."""

    kind = "if"

    def __init__(self, spec_index, layer, out_shape, relu_index=None):
        self.spec_index = spec_index
        self.layer = layer
        self.out_shape = out_shape
        self.relu_index = relu_index

    def init_state(self, batch, config):
        shape = _cl_shape(self.out_shape, batch)
        self.state = NeuronLayerState(shape)
        self.z_const = None
        self._theta = np.zeros(shape)
        self._wt = None
        self._taps = None
        if self.layer is not None and self.layer.kind == "dense":
            self._wt = np.ascontiguousarray(self.layer.weight.T)
        elif self.layer is not None and _kernels.ENABLED:
            self._taps = np.ascontiguousarray(self.layer.weight.transpose(2, 3, 1, 0))
            self._zbuf = np.zeros(shape)

    def current(self, s_cl, config):
        layer = self.layer
        if layer.kind == "conv2d":
            if self._taps is not None:
                xpad = _pad_same(s_cl, layer) if layer.padding == "same" else s_cl
                sh, sw = layer.stride
                _kernels.conv_cl(xpad, self._taps, layer.bias, self._zbuf, sh, sw)
                lin = self._zbuf
            else:
                lin = ann.conv2d_channels_last(
                    s_cl, layer.weight, layer.bias, layer.stride, layer.padding
                )
        else:
            lin = s_cl @ self._wt + layer.bias
        return lin if config.tau == 1.0 else config.tau * lin

    def step(self, s_cl, config):
        z = self.z_const if s_cl is None else self.current(s_cl, config)
        if _kernels.ENABLED:
            state = self.state
            _kernels.if_step(
                state.v.reshape(-1),
                np.ascontiguousarray(z).reshape(-1),
                state.n.reshape(-1),
                self._theta.reshape(-1),
                config.tau,
                config.reset_mode == "to_zero",
                config.clamp_negative_v,
            )
            state.theta = self._theta
            return self._theta
        _, theta = step_neuron(self.state, z, config)
        return theta


def _pad_same(s_cl, layer):
    from .ann import _same_padding

    kh, kw = layer.weight.shape[2:]
    sh, sw = layer.stride
    ph = _same_padding(s_cl.shape[1], kh, sh)
    pw = _same_padding(s_cl.shape[2], kw, sw)
    return np.pad(s_cl, ((0, 0), ph, pw, (0, 0)))


class _AvgPoolNode(_IFNode):
    """Average pooling as a fixed-weight spiking layer (weights 1/|window|)."""

    kind = "avgpool"

    def __init__(self, spec_index, layer, out_shape):
        super().__init__(spec_index, None, out_shape)
        self.window = layer.window
        self.stride = layer.stride

    def init_state(self, batch, config):
        shape = _cl_shape(self.out_shape, batch)
        self.state = NeuronLayerState(shape)
        self.z_const = None
        self._theta = np.zeros(shape)
        self._taps = None

    def current(self, s_cl, config):
        kh, kw = self.window
        sh, sw = self.stride
        win = sliding_window_view(s_cl, (kh, kw), axis=(1, 2))[:, ::sh, ::sw]
        lin = win.mean(axis=(-2, -1))
        return lin if config.tau == 1.0 else config.tau * lin


class _MaxPoolNode:
    kind = "maxpool"

    def __init__(self, spec_index, layer, out_shape):
        self.spec_index = spec_index
        self.window = layer.window
        self.stride = layer.stride
        self.out_shape = out_shape

    def init_state(self, batch, config):
        self.rho = None  # created lazily once the input shape is seen
        self.counts = np.zeros(_cl_shape(self.out_shape, batch), dtype=np.int64)
        self._out = np.zeros(_cl_shape(self.out_shape, batch))

    def step(self, s_cl, config):
        if self.rho is None:
            self.rho = np.zeros(s_cl.shape)
        g = config.maxpool_gamma
        if _kernels.ENABLED:
            kh, kw = self.window
            sh, sw = self.stride
            _kernels.ewma_gate(self.rho, np.ascontiguousarray(s_cl), self._out,
                               g, kh, kw, sh, sw)
            out = self._out
        else:
            self.rho *= g
            self.rho += (1.0 - g) * s_cl
            out = _gated_pool(self.rho, s_cl, self.window, self.stride, axes=(1, 2))
        self.counts += out.astype(np.int64)
        return out


class _FlattenNode:
    kind = "flatten"

    def __init__(self, spec_index, out_shape):
        self.spec_index = spec_index
        self.out_shape = out_shape

    def init_state(self, batch, config):
        pass

    def step(self, s_cl, config):
        return _flat_nchw(s_cl)


class _SoftmaxHeadNode:
    """Final dense layer feeding the Poisson-clocked softmax readout."""

    kind = "softmax_head"

    def __init__(self, spec_index, layer, out_shape):
        self.spec_index = spec_index
        self.layer = layer
        self.out_shape = out_shape

    def init_state(self, batch, config):
        self.state = SoftmaxOutputState((batch,) + tuple(self.out_shape))
        self.z_const = None
        self._wt = np.ascontiguousarray(self.layer.weight.T)

    def current(self, s_cl, config):
        lin = s_cl @ self._wt + self.layer.bias
        return lin if config.tau == 1.0 else config.tau * lin

    def accumulate(self, s_cl, config):
        z = self.z_const if s_cl is None else self.current(s_cl, config)
        self.state.v += z
        return self.state.v


def lower(net: NetworkSpec):
    """Map a folded NetworkSpec onto runtime nodes (relu markers are consumed
    by the preceding conv/dense; a trailing softmax becomes the readout)."""
    shapes = net.output_shapes()
    nodes = []
    i = 0
    layers = net.layers
    while i < len(layers):
        layer = layers[i]
        kind = layer.kind
        if kind == "batchnorm":
            raise UnsupportedLayer("fold batchnorm before simulating")
        if kind in ("conv2d", "dense"):
            nxt = layers[i + 1].kind if i + 1 < len(layers) else None
            if nxt == "softmax":
                if kind != "dense":
                    raise UnsupportedLayer("softmax must follow a dense layer")
                nodes.append(_SoftmaxHeadNode(i, layer, shapes[i]))
                i += 2
            elif nxt == "relu":
                nodes.append(_IFNode(i, layer, shapes[i], relu_index=i + 1))
                i += 2
            else:
                nodes.append(_IFNode(i, layer, shapes[i]))
                i += 1
            continue
        if kind == "maxpool":
            nodes.append(_MaxPoolNode(i, layer, shapes[i]))
        elif kind == "avgpool":
            nodes.append(_AvgPoolNode(i, layer, shapes[i]))
        elif kind == "flatten":
            nodes.append(_FlattenNode(i, shapes[i]))
        elif kind in ("relu", "softmax"):
            raise UnsupportedLayer(
                f"layer {i}: {kind} must directly follow a conv/dense layer"
            )
        i += 1
    if not nodes:
        raise UnsupportedLayer("network has no layers to simulate")
    for node in nodes[:-1]:
        if node.kind == "softmax_head":
            raise UnsupportedLayer("softmax output must be the final layer")
    return nodes


# ---------------------------------------------------------------------------
# Simulation traces
# ---------------------------------------------------------------------------

@dataclass
class TraceLayer:
    spec_index: int
    kind: str
    counts: np.ndarray
    v_final: np.ndarray | None
    relu_index: int | None = None

    def rates(self, config: SimConfig):
        return self.counts / config.duration


@dataclass
class SimTrace:
    """Everything recorded from one simulated sample (channels-first)."""

    config: SimConfig
    sample_index: int
    layers: list
    output_spikes: np.ndarray     # (n_steps, K) 0/1, one-hot for softmax heads
    output_membrane: np.ndarray   # (n_steps, K) membrane after each step
    input_mode: str
    input_values: np.ndarray | None = None   # analog mode: the static input
    input_counts: np.ndarray | None = None   # poisson mode: input spike counts

    @property
    def output_counts(self):
        return self.output_spikes.sum(axis=0).astype(np.int64)

    def to_json(self):
        def arr(a):
            return None if a is None else np.asarray(a).tolist()

        return {
            "config": self.config.to_json(),
            "sample_index": self.sample_index,
            "input_mode": self.input_mode,
            "input_values": arr(self.input_values),
            "input_counts": arr(self.input_counts),
            "layers": [
                {
                    "spec_index": t.spec_index,
                    "kind": t.kind,
                    "relu_index": t.relu_index,
                    "counts": arr(t.counts),
                    "v_final": arr(t.v_final),
                    "rates": arr(t.rates(self.config)),
                }
                for t in self.layers
            ],
            "output_spikes": arr(self.output_spikes),
            "output_membrane": arr(self.output_membrane),
        }

    @classmethod
    def from_json(cls, obj):
        config = SimConfig.from_json(obj["config"])

        def arr(v, dtype=np.float64):
            return None if v is None else np.asarray(v, dtype=dtype)

        layers = [
            TraceLayer(
                spec_index=int(t["spec_index"]),
                kind=t["kind"],
                counts=arr(t["counts"], np.int64),
                v_final=arr(t["v_final"]),
                relu_index=t.get("relu_index"),
            )
            for t in obj["layers"]
        ]
        return cls(
            config=config,
            sample_index=int(obj["sample_index"]),
            layers=layers,
            output_spikes=arr(obj["output_spikes"], np.uint8),
            output_membrane=arr(obj["output_membrane"]),
            input_mode=obj["input_mode"],
            input_values=arr(obj["input_values"]),
            input_counts=arr(obj["input_counts"], np.int64),
        )

    def save_json(self, path):
        with open(path, "w") as f:
            json.dump(self.to_json(), f)

    @classmethod
    def load_json(cls, path):
        with open(path) as f:
            return cls.from_json(json.load(f))


# ---------------------------------------------------------------------------
# Engine
# ---------------------------------------------------------------------------

def _sample_rng(config, sample_index):
    return np.random.default_rng([config.rng_seed, int(sample_index)])


def _input_to_cl(frame):
    """A batch frame in input layout ((B,C,H,W) or (B,K)) to engine layout."""
    if frame.ndim == 4:
        return np.ascontiguousarray(frame.transpose(0, 2, 3, 1))
    return frame


def simulate_batch(net: NetworkSpec, inputs, config: SimConfig, sample_indices=None):
    """Simulate a batch of samples under per-sample RNG streams.

    ``inputs`` has shape (B,) + net.input_shape.  Returns one SimTrace per
    sample; every sample sees exactly the RNG draws it would see in a
    standalone :func:`simulate` call with the same sample index.
    """
    xs = np.asarray(inputs, dtype=np.float64)
    if xs.shape[1:] != net.input_shape:
        raise ShapeMismatch(
            f"batch input shape {xs.shape[1:]} != network input {net.input_shape}"
        )
    batch = xs.shape[0]
    if sample_indices is None:
        sample_indices = np.arange(batch)
    _ensure_kernels()
    nodes = lower(net)
    for node in nodes:
        node.init_state(batch, config)

    analog = config.input_mode == "analog_current"
    first = nodes[0]
    has_head = nodes[-1].kind == "softmax_head"
    n_steps = config.n_steps

    if analog and first.kind not in ("if", "softmax_head"):
        raise UnsupportedLayer("analog input requires a conv/dense first layer")

    # One RNG pass per sample: Poisson train, generator flags, event uniforms.
    train = None if analog else np.empty((batch, n_steps) + net.input_shape, dtype=bool)
    flags = np.empty((batch, n_steps), dtype=bool) if has_head else None
    uniform_queues = []
    for b in range(batch):
        rng = _sample_rng(config, sample_indices[b])
        if not analog:
            train[b] = encode_poisson(xs[b], rng, config)
        if has_head:
            flags[b] = rng.random(n_steps) < config.generator_prob
            uniform_queues.append(rng.random(int(flags[b].sum())))
    cursors = np.zeros(batch, dtype=np.int64)

    if analog:
        first.z_const = first.current(_input_to_cl(xs), config)

    k_out = int(np.prod(nodes[-1].out_shape))
    output_spikes = np.zeros((batch, n_steps, k_out), dtype=np.uint8)
    output_membrane = np.zeros((batch, n_steps, k_out))

    for t in range(n_steps):
        s = None if analog else _input_to_cl(train[:, t].astype(np.float64))
        for node in nodes:
            if node.kind == "softmax_head":
                v = node.accumulate(s, config)
                output_membrane[:, t] = v.reshape(batch, -1)
                rows = np.nonzero(flags[:, t])[0]
                if rows.size:
                    p = _softmax_rows(v[rows].reshape(-1, k_out))
                    u = np.array([uniform_queues[b][cursors[b]] for b in rows])
                    cls = np.minimum((u[:, None] > np.cumsum(p, axis=1)).sum(axis=1),
                                     k_out - 1)
                    output_spikes[rows, t, cls] = 1
                    cursors[rows] += 1
                s = None
            else:
                s = node.step(s, config)
                if node is nodes[-1]:
                    output_spikes[:, t] = _flat_nchw(s).astype(np.uint8)
                    output_membrane[:, t] = _flat_nchw(node.state.v)

    if not analog:
        input_counts = train.sum(axis=1).astype(np.int64)

    traces = []
    for b in range(batch):
        layers = []
        for node in nodes:
            if node.kind in ("if", "avgpool"):
                counts = _to_nchw(node.state.n[b], node.out_shape)
                v_final = _to_nchw(node.state.v[b].copy(), node.out_shape)
            elif node.kind == "maxpool":
                counts = _to_nchw(node.counts[b], node.out_shape)
                v_final = None
            elif node.kind == "flatten":
                if layers:
                    counts = layers[-1].counts.reshape(-1).copy()
                else:  # flatten directly on the (poisson) input train
                    counts = input_counts[b].reshape(-1).copy()
                v_final = None
            else:  # softmax head
                counts = output_spikes[b].sum(axis=0).astype(np.int64)
                v_final = node.state.v[b].copy()
            layers.append(
                TraceLayer(
                    spec_index=node.spec_index,
                    kind=node.kind,
                    counts=counts,
                    v_final=v_final,
                    relu_index=getattr(node, "relu_index", None),
                )
            )
        traces.append(
            SimTrace(
                config=config,
                sample_index=int(sample_indices[b]),
                layers=layers,
                output_spikes=output_spikes[b].copy(),
                output_membrane=output_membrane[b].copy(),
                input_mode=config.input_mode,
                input_values=xs[b].copy() if analog else None,
                input_counts=None if analog else input_counts[b].copy(),
            )
        )
    return traces


def simulate(net: NetworkSpec, x, config: SimConfig, sample_index: int = 0) -> SimTrace:
    """Simulate one input for ``config.n_steps`` steps and return its trace."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != net.input_shape:
        raise ShapeMismatch(
            f"input shape {x.shape} does not match network input {net.input_shape}"
        )
    return simulate_batch(net, x[None], config, sample_indices=[sample_index])[0]


def classify(trace: SimTrace, step: int | None = None) -> int:
    """Predicted class: argmax of output spike counts; ties (including the
    all-silent case) fall back to the accumulated output membrane."""
    n = trace.output_spikes.shape[0] if step is None else step
    counts = trace.output_spikes[:n].sum(axis=0)
    if n > 0:
        membrane = trace.output_membrane[n - 1]
    else:
        membrane = np.zeros_like(counts, dtype=np.float64)
    best = counts.max() if counts.size else 0
    tied = counts == best
    masked = np.where(tied, membrane, -np.inf)
    return int(np.argmax(masked))
