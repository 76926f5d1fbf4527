"""Reference ReLU CNN forward pass with per-layer activation recording.

All operations accept a single sample or a batch with a leading axis
(conv/pool: (C,H,W) or (N,C,H,W); dense/softmax: (K,) or (N,K)) and
compute in float64.
"""

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeMismatch
from .netio import NetworkSpec


def _same_padding(size, kernel, stride):
    out = -(-size // stride)
    total = max((out - 1) * stride + kernel - size, 0)
    return total // 2, total - total // 2


def conv2d_channels_last(x_cl, kernel, bias=None, stride=(1, 1), padding="valid"):
    """Cross-correlation on channels-last input (..., H, W, C), channels-last
    output.  One GEMM per kernel tap over long contiguous rows; this layout
    is what the time-stepped simulator runs on, and the NCHW entry point
    below shares it so both sides produce bitwise-identical sums.
    """
    x_cl = np.asarray(x_cl, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    if x_cl.ndim != 4 or kernel.ndim != 4:
        raise ShapeMismatch(f"conv2d: bad ranks {x_cl.shape} / {kernel.shape}")
    n, h, w, c = x_cl.shape
    o, ck, kh, kw = kernel.shape
    if ck != c:
        raise ShapeMismatch(f"conv2d: input channels {c} != kernel {ck}")
    sh, sw = stride
    if padding == "same":
        ph = _same_padding(h, kh, sh)
        pw = _same_padding(w, kw, sw)
        x_cl = np.pad(x_cl, ((0, 0), ph, pw, (0, 0)))
        h, w = x_cl.shape[1:3]
    elif padding != "valid":
        raise ShapeMismatch(f"conv2d: unknown padding {padding!r}")
    if kh > h or kw > w:
        raise ShapeMismatch("conv2d: kernel larger than (padded) input")
    ho, wo = (h - kh) // sh + 1, (w - kw) // sw + 1

    # one GEMM per kernel tap over contiguous rows, accumulated in order
    taps = np.ascontiguousarray(kernel.transpose(2, 3, 1, 0))  # (kh,kw,C,O)
    out = np.zeros((n * ho * wo, o))
    tmp = np.empty_like(out)
    for di in range(kh):
        for dj in range(kw):
            rows = x_cl[:, di : di + sh * ho : sh, dj : dj + sw * wo : sw, :]
            np.matmul(rows.reshape(-1, c), taps[di, dj], out=tmp)
            out += tmp
    out = out.reshape(n, ho, wo, o)
    if bias is not None:
        out += np.asarray(bias, dtype=np.float64)
    return out


def conv2d(x, kernel, bias=None, stride=(1, 1), padding="valid"):
    """Cross-correlate ``x`` (C,H,W or N,C,H,W) with ``kernel`` (O,C,kh,kw)."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4:
        raise ShapeMismatch(f"conv2d: bad input rank {x.shape}")
    x_cl = np.ascontiguousarray(x.transpose(0, 2, 3, 1))
    out = conv2d_channels_last(x_cl, kernel, bias, stride, padding)
    out = out.transpose(0, 3, 1, 2)
    return out[0] if single else out


def dense(x, w, b=None):
    """Affine map ``w @ x + b`` for x of shape (K,) or (N,K)."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if x.shape[-1] != w.shape[1]:
        raise ShapeMismatch(f"dense: input {x.shape[-1]} != weight {w.shape[1]}")
    out = x @ w.T
    if b is not None:
        out = out + np.asarray(b, dtype=np.float64)
    return out


def pool(x, kind, window, stride=None):
    """Per-window max or mean over the trailing two axes."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 3
    if single:
        x = x[None]
    kh, kw = window
    sh, sw = stride if stride is not None else window
    if kh > x.shape[2] or kw > x.shape[3]:
        raise ShapeMismatch(f"pool: window {window} larger than input {x.shape[2:]}")
    windows = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
    if kind == "max":
        out = windows.max(axis=(4, 5))
    elif kind == "avg":
        out = windows.mean(axis=(4, 5))
    else:
        raise ShapeMismatch(f"pool: unknown kind {kind!r}")
    return out[0] if single else out


def activation(x, kind):
    """Elementwise ReLU or (stabilized) softmax over the last axis."""
    x = np.asarray(x, dtype=np.float64)
    if kind == "relu":
        return np.maximum(x, 0.0)
    if kind == "softmax":
        if x.ndim not in (1, 2):
            raise ShapeMismatch("softmax expects a rank-1 output (or a batch of them)")
        shifted = x - x.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=-1, keepdims=True)
    raise ShapeMismatch(f"activation: unknown kind {kind!r}")


def batchnorm_infer(x, mean, std, gamma, beta):
    """Per-channel affine transform gamma/std * (x - mean) + beta."""
    std = np.asarray(std, dtype=np.float64)
    if not np.all(std > 0):
        raise ShapeMismatch("batchnorm: std must be positive")
    x = np.asarray(x, dtype=np.float64)
    scale = np.asarray(gamma, dtype=np.float64) / std
    shift = np.asarray(beta, dtype=np.float64) - scale * np.asarray(mean, dtype=np.float64)
    if x.ndim >= 3:  # (C,H,W) or (N,C,H,W): channel axis before the spatial pair
        shape = (-1,) + (1,) * 2
        return x * scale.reshape(shape) + shift.reshape(shape)
    return x * scale + shift


@dataclass(frozen=True)
class ActivationRecord:
    """Post-activation tensors for every layer, plus the final output."""

    activations: tuple
    output: np.ndarray


def apply_layer(layer, x, batched=False):
    k = layer.kind
    if k == "conv2d":
        return conv2d(x, layer.weight, layer.bias, layer.stride, layer.padding)
    if k == "dense":
        return dense(x, layer.weight, layer.bias)
    if k == "batchnorm":
        return batchnorm_infer(x, layer.mean, layer.std, layer.gamma, layer.beta)
    if k in ("maxpool", "avgpool"):
        return pool(x, k[:3], layer.window, layer.stride)
    if k in ("relu", "softmax"):
        return activation(x, k)
    if k == "flatten":
        return x.reshape(x.shape[0], -1) if batched else x.reshape(-1)
    raise ShapeMismatch(f"unknown layer kind {k!r}")


def forward(net: NetworkSpec, x) -> ActivationRecord:
    """Run the full network, recording every post-layer activation.

    ``x`` is a single input of ``net.input_shape`` or a batch with one
    extra leading axis; records are batched accordingly.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape == net.input_shape:
        batched = False
    elif x.shape[1:] == net.input_shape:
        batched = True
    else:
        raise ShapeMismatch(
            f"input shape {x.shape} does not match network input {net.input_shape}"
        )
    activations = []
    for layer in net.layers:
        x = apply_layer(layer, x, batched)
        activations.append(x)
    return ActivationRecord(activations=tuple(activations), output=x)
