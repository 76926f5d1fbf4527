"""Portable model container ("ASNN" format) and IDX dataset ingestion.

The container layout is:

    magic         4 bytes, b"ASNN"
    version       uint32, little-endian
    manifest_len  uint64, little-endian
    manifest      UTF-8 JSON (canonical: sorted keys, no whitespace)
    payload       concatenated float32 little-endian tensors, in manifest order

Tensors are stored as float32 but handed to callers as float64; all
downstream arithmetic runs in 64-bit.
"""

import gzip
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BadMagic,
    CountMismatch,
    InvalidTensor,
    ManifestError,
    ShapeMismatch,
    TruncatedFile,
    VersionMismatch,
)

MAGIC = b"ASNN"
VERSION = 1

LAYER_KINDS = (
    "conv2d",
    "dense",
    "batchnorm",
    "relu",
    "softmax",
    "maxpool",
    "avgpool",
    "flatten",
)

_IDX_IMAGE_MAGIC = 0x00000803
_IDX_LABEL_MAGIC = 0x00000801


def _freeze(arr):
    """Return a read-only float64 copy of an array-like."""
    out = np.ascontiguousarray(arr, dtype=np.float64)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class LayerSpec:
    """One layer of a network; parameters depend on ``kind``.

    conv2d:    weight (out, in, kh, kw), bias (out,), stride, padding
    dense:     weight (out, in), bias (out,)
    batchnorm: mean, std, gamma, beta (per channel); std includes any
               training-stack epsilon and must be > 0
    maxpool / avgpool: window, stride
    relu / softmax / flatten: no parameters
    """

    kind: str
    weight: np.ndarray | None = None
    bias: np.ndarray | None = None
    mean: np.ndarray | None = None
    std: np.ndarray | None = None
    gamma: np.ndarray | None = None
    beta: np.ndarray | None = None
    window: tuple | None = None
    stride: tuple | None = None
    padding: str | None = None

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ShapeMismatch(f"unknown layer kind {self.kind!r}")
        for name in ("weight", "bias", "mean", "std", "gamma", "beta"):
            val = getattr(self, name)
            if val is not None:
                object.__setattr__(self, name, _freeze(val))
        for name in ("window", "stride"):
            val = getattr(self, name)
            if val is not None:
                object.__setattr__(self, name, tuple(int(v) for v in val))
        self._validate()

    def _validate(self):
        k = self.kind
        if k == "conv2d":
            if self.weight is None or self.weight.ndim != 4:
                raise ShapeMismatch("conv2d needs a rank-4 weight (out,in,kh,kw)")
            if self.bias is None or self.bias.shape != (self.weight.shape[0],):
                raise ShapeMismatch("conv2d bias must match output channels")
            if self.padding not in ("valid", "same"):
                raise ShapeMismatch("conv2d padding must be 'valid' or 'same'")
            if self.stride is None or len(self.stride) != 2:
                raise ShapeMismatch("conv2d needs a 2-tuple stride")
        elif k == "dense":
            if self.weight is None or self.weight.ndim != 2:
                raise ShapeMismatch("dense needs a rank-2 weight (out,in)")
            if self.bias is None or self.bias.shape != (self.weight.shape[0],):
                raise ShapeMismatch("dense bias must match output size")
        elif k == "batchnorm":
            for name in ("mean", "std", "gamma", "beta"):
                if getattr(self, name) is None:
                    raise ShapeMismatch(f"batchnorm missing {name}")
            shapes = {getattr(self, n).shape for n in ("mean", "std", "gamma", "beta")}
            if len(shapes) != 1:
                raise ShapeMismatch("batchnorm parameter shapes differ")
            if not np.all(self.std > 0):
                raise ShapeMismatch("batchnorm std must be positive")
        elif k in ("maxpool", "avgpool"):
            if self.window is None or len(self.window) != 2:
                raise ShapeMismatch(f"{k} needs a 2-tuple window")
            if self.stride is None or len(self.stride) != 2:
                raise ShapeMismatch(f"{k} needs a 2-tuple stride")

    def tensors(self):
        """Named parameter tensors of this layer, in canonical order."""
        names = {
            "conv2d": ("bias", "weight"),
            "dense": ("bias", "weight"),
            "batchnorm": ("beta", "gamma", "mean", "std"),
        }.get(self.kind, ())
        return {name: getattr(self, name) for name in names}


@dataclass(frozen=True)
class NetworkSpec:
    """Ordered layer graph; the single model representation for ANN,
    converted, and SNN execution."""

    layers: tuple
    input_shape: tuple
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        self.output_shapes()  # raises if shapes do not compose
        for i, layer in enumerate(self.layers):
            if layer.kind == "softmax" and i != len(self.layers) - 1:
                raise ShapeMismatch("softmax is only allowed as the final layer")

    def output_shapes(self):
        """Per-layer output shapes, inferred by walking the graph."""
        shapes = []
        shape = self.input_shape
        for i, layer in enumerate(self.layers):
            shape = _infer_shape(layer, shape, i)
            shapes.append(shape)
        return shapes

    def replace_layers(self, layers, meta=None):
        return NetworkSpec(
            layers=tuple(layers),
            input_shape=self.input_shape,
            meta=dict(self.meta if meta is None else meta),
        )


def _pool_hw(h, w, window, stride, what):
    kh, kw = window
    sh, sw = stride
    if kh > h or kw > w:
        raise ShapeMismatch(f"{what} window {window} larger than input {(h, w)}")
    return (h - kh) // sh + 1, (w - kw) // sw + 1


def _infer_shape(layer, shape, index):
    k = layer.kind
    if k == "conv2d":
        if len(shape) != 3:
            raise ShapeMismatch(f"layer {index}: conv2d expects (C,H,W), got {shape}")
        cin, h, w = shape
        out, win, kh, kw = layer.weight.shape
        if win != cin:
            raise ShapeMismatch(
                f"layer {index}: conv2d input channels {cin} != weight {win}"
            )
        sh, sw = layer.stride
        if layer.padding == "same":
            ho, wo = -(-h // sh), -(-w // sw)
        else:
            if kh > h or kw > w:
                raise ShapeMismatch(f"layer {index}: kernel larger than input")
            ho, wo = (h - kh) // sh + 1, (w - kw) // sw + 1
        return (out, ho, wo)
    if k == "dense":
        if len(shape) != 1:
            raise ShapeMismatch(f"layer {index}: dense expects rank-1 input, got {shape}")
        out, win = layer.weight.shape
        if win != shape[0]:
            raise ShapeMismatch(f"layer {index}: dense input {shape[0]} != weight {win}")
        return (out,)
    if k == "batchnorm":
        channels = layer.mean.shape[0]
        if shape[0] != channels:
            raise ShapeMismatch(
                f"layer {index}: batchnorm channels {channels} != input {shape[0]}"
            )
        return shape
    if k in ("maxpool", "avgpool"):
        if len(shape) != 3:
            raise ShapeMismatch(f"layer {index}: {k} expects (C,H,W), got {shape}")
        c, h, w = shape
        ho, wo = _pool_hw(h, w, layer.window, layer.stride, k)
        return (c, ho, wo)
    if k == "flatten":
        return (int(np.prod(shape)),)
    if k in ("relu", "softmax"):
        return shape
    raise ShapeMismatch(f"layer {index}: unknown kind {k!r}")


# ---------------------------------------------------------------------------
# ASNN container
# ---------------------------------------------------------------------------

def _layer_manifest_entry(layer, offset):
    entry = {"kind": layer.kind}
    if layer.padding is not None:
        entry["padding"] = layer.padding
    if layer.stride is not None:
        entry["stride"] = list(layer.stride)
    if layer.window is not None:
        entry["window"] = list(layer.window)
    tensors = {}
    for name, arr in layer.tensors().items():
        tensors[name] = {"offset": offset, "shape": list(arr.shape)}
        offset += arr.size * 4
    if tensors:
        entry["tensors"] = tensors
    return entry, offset


def save_model(net: NetworkSpec, path) -> None:
    """Write ``net`` to ``path`` in the ASNN container format."""
    entries = []
    offset = 0
    payload = bytearray()
    for layer in net.layers:
        entry, offset = _layer_manifest_entry(layer, offset)
        entries.append(entry)
        for arr in layer.tensors().values():
            payload += arr.astype("<f4").tobytes()
    manifest = {
        "input_shape": list(net.input_shape),
        "layers": entries,
        "layout": "NCHW",
        "meta": net.meta,
    }
    manifest_bytes = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode(
        "utf-8"
    )
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<Q", len(manifest_bytes)))
        f.write(manifest_bytes)
        f.write(bytes(payload))


def _read_tensor(payload, spec, what):
    try:
        offset = int(spec["offset"])
        shape = tuple(int(v) for v in spec["shape"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ManifestError(f"{what}: malformed tensor entry") from exc
    nbytes = int(np.prod(shape)) * 4 if shape else 4
    if offset < 0 or offset + nbytes > len(payload):
        raise ManifestError(f"{what}: tensor extends past payload end")
    flat = np.frombuffer(payload, dtype="<f4", count=int(np.prod(shape)), offset=offset)
    if not np.all(np.isfinite(flat)):
        raise InvalidTensor(f"{what}: tensor contains NaN or Inf")
    return flat.reshape(shape).astype(np.float64), offset, nbytes


def load_model(path) -> NetworkSpec:
    """Read an ASNN container back into a validated :class:`NetworkSpec`."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 16:
        raise TruncatedFile(f"{path}: shorter than the fixed header")
    if blob[:4] != MAGIC:
        raise BadMagic(f"{path}: magic {blob[:4]!r} != {MAGIC!r}")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise VersionMismatch(f"{path}: version {version}, expected {VERSION}")
    (manifest_len,) = struct.unpack_from("<Q", blob, 8)
    if 16 + manifest_len > len(blob):
        raise TruncatedFile(f"{path}: manifest extends past end of file")
    try:
        manifest = json.loads(blob[16 : 16 + manifest_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ManifestError(f"{path}: manifest is not valid JSON") from exc
    payload = blob[16 + manifest_len :]

    try:
        input_shape = tuple(int(v) for v in manifest["input_shape"])
        entries = manifest["layers"]
        meta = dict(manifest.get("meta", {}))
    except (KeyError, TypeError, ValueError) as exc:
        raise ManifestError(f"{path}: manifest missing required fields") from exc

    layers = []
    cursor = -1
    for i, entry in enumerate(entries):
        what = f"{path}: layer {i}"
        kind = entry.get("kind")
        if kind not in LAYER_KINDS:
            raise ManifestError(f"{what}: unknown kind {kind!r}")
        kwargs = {"kind": kind}
        if "padding" in entry:
            kwargs["padding"] = entry["padding"]
        if "stride" in entry:
            kwargs["stride"] = tuple(entry["stride"])
        if "window" in entry:
            kwargs["window"] = tuple(entry["window"])
        for name, spec in entry.get("tensors", {}).items():
            arr, offset, nbytes = _read_tensor(payload, spec, f"{what} {name!r}")
            if offset <= cursor:
                raise ManifestError(f"{what}: tensor offsets overlap or are unordered")
            cursor = offset + nbytes - 1
            kwargs[name] = arr
        try:
            layers.append(LayerSpec(**kwargs))
        except TypeError as exc:
            raise ManifestError(f"{what}: unexpected tensor names") from exc
    try:
        return NetworkSpec(layers=tuple(layers), input_shape=input_shape, meta=meta)
    except ShapeMismatch:
        raise


# ---------------------------------------------------------------------------
# IDX datasets
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DatasetHandle:
    """Images scaled to [0,1] plus integer class labels."""

    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "images", _freeze(self.images))
        labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)
        if self.images.shape[0] != self.labels.shape[0]:
            raise CountMismatch(
                f"{self.images.shape[0]} images vs {self.labels.shape[0]} labels"
            )
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise InvalidTensor("pixel values outside [0,1] after scaling")

    def __len__(self):
        return self.images.shape[0]


def _read_idx(path, expected_magic, expected_rank):
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "rb") as f:
        blob = f.read()
    if len(blob) < 4 * (1 + expected_rank):
        raise TruncatedFile(f"{path}: shorter than the IDX header")
    (magic,) = struct.unpack_from(">I", blob, 0)
    if magic != expected_magic:
        raise BadMagic(f"{path}: IDX magic 0x{magic:08x} != 0x{expected_magic:08x}")
    dims = struct.unpack_from(f">{expected_rank}I", blob, 4)
    header = 4 * (1 + expected_rank)
    count = int(np.prod(dims))
    if header + count > len(blob):
        raise TruncatedFile(f"{path}: {count} bytes declared, {len(blob) - header} present")
    data = np.frombuffer(blob, dtype=np.uint8, count=count, offset=header)
    return data.reshape(dims)


def load_idx(images_path, labels_path) -> DatasetHandle:
    """Load an IDX image/label pair (plain or gzipped) and scale pixels by 255."""
    images = _read_idx(images_path, _IDX_IMAGE_MAGIC, 3)
    labels = _read_idx(labels_path, _IDX_LABEL_MAGIC, 1)
    return DatasetHandle(images=images.astype(np.float64) / 255.0, labels=labels)
