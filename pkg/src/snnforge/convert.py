"""ANN-to-SNN lowering pipeline: batch-norm folding, activation statistics,
and data-based parameter normalization (max-norm or robust percentile).
"""

from dataclasses import dataclass, field

import numpy as np

from . import ann
from .errors import DeadLayer, ShapeMismatch, UnsupportedLayer
from .netio import LayerSpec, NetworkSpec


def fold_batchnorm(net: NetworkSpec) -> NetworkSpec:
    """Absorb every batchnorm layer into the conv/dense layer before it.

    W' = (gamma/std) * W per output channel, b' = (gamma/std)(b - mean) + beta;
    the batchnorm layers disappear and forward outputs are preserved.
    """
    layers = []
    folded = []
    for i, layer in enumerate(net.layers):
        if layer.kind != "batchnorm":
            layers.append(layer)
            continue
        if not layers or layers[-1].kind not in ("conv2d", "dense"):
            raise UnsupportedLayer(
                f"layer {i}: batchnorm is not immediately preceded by conv/dense"
            )
        prev = layers.pop()
        scale = layer.gamma / layer.std
        if scale.shape[0] != prev.weight.shape[0]:
            raise ShapeMismatch(
                f"layer {i}: batchnorm channels {scale.shape[0]} != "
                f"{prev.weight.shape[0]} outputs"
            )
        shape = (-1,) + (1,) * (prev.weight.ndim - 1)
        layers.append(
            LayerSpec(
                kind=prev.kind,
                weight=prev.weight * scale.reshape(shape),
                bias=scale * (prev.bias - layer.mean) + layer.beta,
                stride=prev.stride,
                padding=prev.padding,
            )
        )
        folded.append(i)
    meta = dict(net.meta)
    meta["bn_folded"] = True
    meta["fold_log"] = folded
    return net.replace_layers(layers, meta)


def relu_layer_indices(net: NetworkSpec):
    return [i for i, layer in enumerate(net.layers) if layer.kind == "relu"]


@dataclass
class ActivationStats:
    """Per-ReLU-layer multiset of post-activation values over a normalization set.

    ``values`` holds the sorted observations (the full multiset in exhaustive
    mode, a seeded uniform reservoir otherwise); ``maxima`` and ``counts``
    are always exact.
    """

    n_samples: int
    mode: str  # "exhaustive" or "reservoir"
    values: dict = field(default_factory=dict)   # layer index -> sorted ndarray
    maxima: dict = field(default_factory=dict)   # layer index -> float
    counts: dict = field(default_factory=dict)   # layer index -> int

    def to_json(self):
        return {
            "n_samples": self.n_samples,
            "mode": self.mode,
            "layers": {
                str(i): {
                    "count": int(self.counts[i]),
                    "max": float(self.maxima[i]),
                    "values": [float(v) for v in self.values[i]],
                }
                for i in sorted(self.values)
            },
        }

    @classmethod
    def from_json(cls, obj):
        stats = cls(n_samples=int(obj["n_samples"]), mode=obj["mode"])
        for key, entry in obj["layers"].items():
            i = int(key)
            stats.values[i] = np.asarray(entry["values"], dtype=np.float64)
            stats.maxima[i] = float(entry["max"])
            stats.counts[i] = int(entry["count"])
        return stats


class _Reservoir:
    """Fixed-size uniform sample (Algorithm R, vectorized per chunk)."""

    def __init__(self, size, rng):
        self.size = size
        self.rng = rng
        self.buf = np.empty(0, dtype=np.float64)
        self.seen = 0

    def add(self, chunk):
        chunk = np.asarray(chunk, dtype=np.float64).ravel()
        if self.buf.size < self.size:
            take = min(self.size - self.buf.size, chunk.size)
            self.buf = np.concatenate([self.buf, chunk[:take]])
            self.seen += take
            chunk = chunk[take:]
        for v in chunk:
            self.seen += 1
            j = self.rng.integers(0, self.seen)
            if j < self.size:
                self.buf[j] = v


def collect_stats(
    net: NetworkSpec,
    data,
    n_samples: int,
    batch_size: int = 256,
    reservoir: int | None = None,
    seed: int = 0,
) -> ActivationStats:
    """Record post-ReLU activation values over the first ``n_samples`` inputs.

    ``data`` is a DatasetHandle (or any object with an ``images`` array).
    Exhaustive by default; pass ``reservoir`` to cap stored values per layer
    with a seeded uniform subsample (count and max stay exact).
    """
    if len(data.images) == 0:
        raise ValueError("empty dataset")
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    n_samples = min(n_samples, len(data.images))
    relu_idx = relu_layer_indices(net)
    mode = "exhaustive" if reservoir is None else "reservoir"
    stats = ActivationStats(n_samples=n_samples, mode=mode)
    chunks = {i: [] for i in relu_idx}
    reservoirs = {
        i: _Reservoir(reservoir, np.random.default_rng([seed, i])) for i in relu_idx
    } if reservoir is not None else None
    maxima = {i: 0.0 for i in relu_idx}
    counts = {i: 0 for i in relu_idx}

    for start in range(0, n_samples, batch_size):
        batch = data.images[start : start + batch_size].reshape(
            (-1,) + net.input_shape
        )
        record = ann.forward(net, batch)
        for i in relu_idx:
            act = record.activations[i]
            flat = act.reshape(-1)
            counts[i] += flat.size
            if flat.size:
                maxima[i] = max(maxima[i], float(flat.max()))
            if reservoirs is None:
                chunks[i].append(flat)
            else:
                reservoirs[i].add(flat)

    for i in relu_idx:
        if reservoirs is None:
            vals = np.concatenate(chunks[i]) if chunks[i] else np.empty(0)
        else:
            vals = reservoirs[i].buf
        stats.values[i] = np.sort(vals)
        stats.maxima[i] = maxima[i]
        stats.counts[i] = counts[i]
    return stats


def percentile_scale(stats: ActivationStats, p: float) -> dict:
    """Per-layer normalization scale: the p-th percentile of the recorded
    activations (linear interpolation on the sorted sample; p=100 is the
    exact maximum).
    """
    if not 0 < p <= 100:
        raise ValueError(f"percentile must be in (0, 100], got {p}")
    lambdas = {}
    for i, values in stats.values.items():
        if values.size == 0:
            raise DeadLayer(f"layer {i}: no recorded activations")
        if p == 100:
            lam = stats.maxima[i]
        else:
            lam = float(np.percentile(values, p))
        if lam <= 0:
            raise DeadLayer(
                f"layer {i}: percentile {p} of activations is {lam}; the layer "
                "never fires at this scale"
            )
        lambdas[i] = lam
    return lambdas


@dataclass
class ConversionReport:
    """What normalization did: per-layer scales and applied rescale factors."""

    lambdas: dict                 # relu layer index -> lambda
    percentile: float | None
    rescales: list = field(default_factory=list)
    fold_log: list = field(default_factory=list)
    normalized: bool = True

    def to_json(self):
        return {
            "percentile": self.percentile,
            "normalized": self.normalized,
            "lambdas": {str(k): float(v) for k, v in sorted(self.lambdas.items())},
            "rescales": self.rescales,
            "fold_log": list(self.fold_log),
        }

    @classmethod
    def from_json(cls, obj):
        return cls(
            lambdas={int(k): float(v) for k, v in obj["lambdas"].items()},
            percentile=obj.get("percentile"),
            rescales=list(obj.get("rescales", [])),
            fold_log=list(obj.get("fold_log", [])),
            normalized=bool(obj.get("normalized", True)),
        )


def governing_scale(net: NetworkSpec, layer_index: int, lambdas: dict):
    """Scale anchored at the next ReLU after ``layer_index`` (before any other
    conv/dense); 1.0 for an output layer with no ReLU of its own."""
    for j in range(layer_index + 1, len(net.layers)):
        kind = net.layers[j].kind
        if kind == "relu":
            if j not in lambdas:
                raise ValueError(f"no scale recorded for relu layer {j}")
            return lambdas[j], j
        if kind in ("conv2d", "dense"):
            break
    return 1.0, None


def normalize_params(
    net: NetworkSpec, lambdas: dict, percentile: float | None = None
):
    """Rescale weights and biases so activations stay below their layer scale.

    For each conv/dense layer with incoming scale lam_prev and own scale lam:
    W' = W * lam_prev / lam and b' = b / lam.  Pooling, flatten and softmax
    layers pass the running scale through unchanged.
    """
    for lam in lambdas.values():
        if lam <= 0:
            raise DeadLayer(f"nonpositive scale {lam}")
    if any(layer.kind == "batchnorm" for layer in net.layers):
        raise UnsupportedLayer("fold batchnorm before normalizing parameters")

    layers = []
    rescales = []
    lam_prev = 1.0
    for i, layer in enumerate(net.layers):
        if layer.kind not in ("conv2d", "dense"):
            layers.append(layer)
            continue
        lam, relu_at = governing_scale(net, i, lambdas)
        layers.append(
            LayerSpec(
                kind=layer.kind,
                weight=layer.weight * (lam_prev / lam),
                bias=layer.bias / lam,
                stride=layer.stride,
                padding=layer.padding,
            )
        )
        rescales.append(
            {
                "layer": i,
                "relu": relu_at,
                "lambda": float(lam),
                "weight_factor": float(lam_prev / lam),
                "bias_factor": float(1.0 / lam),
            }
        )
        lam_prev = lam

    meta = dict(net.meta)
    meta["normalized"] = True
    if percentile is not None:
        meta["percentile"] = float(percentile)
    out = net.replace_layers(layers, meta)
    report = ConversionReport(
        lambdas=dict(lambdas),
        percentile=percentile,
        rescales=rescales,
        fold_log=list(net.meta.get("fold_log", [])),
    )
    return out, report
