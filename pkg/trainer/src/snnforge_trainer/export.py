"""Export a trained torch model to the ASNN container.

This writer implements the container byte layout independently of the
snnforge reader so the two sides cross-check each other:

    magic b"ASNN" | uint32 version (LE) | uint64 manifest length (LE)
    | canonical JSON manifest (sorted keys, compact separators)
    | float32 little-endian tensors concatenated in manifest order

Batch-norm parameters are exported raw (mean, std = sqrt(var + eps), gamma,
beta); folding them into the preceding layer is the simulator side's job.
"""

import json
import struct

import numpy as np
import torch.nn as nn

MAGIC = b"ASNN"
VERSION = 1


class UnsupportedLayer(ValueError):
    """Module has no counterpart among the simulator's layer kinds."""


def _tensor(arr):
    return np.ascontiguousarray(arr.detach().cpu().numpy(), dtype=np.float32)


def module_to_layers(model: nn.Module):
    """Translate supported torch modules into (kind, params, tensors) entries."""
    layers = []
    for module in model:
        if isinstance(module, nn.Conv2d):
            kh, kw = module.kernel_size
            ph, pw = module.padding if isinstance(module.padding, tuple) else (
                module.padding, module.padding)
            if module.stride != (1, 1) or (ph, pw) not in ((0, 0), (kh // 2, kw // 2)):
                raise UnsupportedLayer(
                    "only stride-1 conv with 'valid' or half padding is exportable"
                )
            padding = "same" if (ph, pw) != (0, 0) else "valid"
            if padding == "same" and (kh % 2 == 0 or kw % 2 == 0):
                raise UnsupportedLayer("'same' export requires odd kernels")
            layers.append({
                "kind": "conv2d",
                "padding": padding,
                "stride": [1, 1],
                "tensors": {
                    "bias": _tensor(module.bias),
                    "weight": _tensor(module.weight),
                },
            })
        elif isinstance(module, (nn.BatchNorm2d, nn.BatchNorm1d)):
            std = np.sqrt(_tensor(module.running_var).astype(np.float64)
                          + module.eps).astype(np.float32)
            layers.append({
                "kind": "batchnorm",
                "tensors": {
                    "beta": _tensor(module.bias),
                    "gamma": _tensor(module.weight),
                    "mean": _tensor(module.running_mean),
                    "std": std,
                },
            })
        elif isinstance(module, nn.ReLU):
            layers.append({"kind": "relu"})
        elif isinstance(module, nn.MaxPool2d):
            k = module.kernel_size
            s = module.stride or k
            k = (k, k) if isinstance(k, int) else tuple(k)
            s = (s, s) if isinstance(s, int) else tuple(s)
            layers.append({"kind": "maxpool", "window": list(k), "stride": list(s)})
        elif isinstance(module, nn.AvgPool2d):
            k = module.kernel_size
            s = module.stride or k
            k = (k, k) if isinstance(k, int) else tuple(k)
            s = (s, s) if isinstance(s, int) else tuple(s)
            layers.append({"kind": "avgpool", "window": list(k), "stride": list(s)})
        elif isinstance(module, nn.Flatten):
            layers.append({"kind": "flatten"})
        elif isinstance(module, nn.Linear):
            layers.append({
                "kind": "dense",
                "tensors": {
                    "bias": _tensor(module.bias),
                    "weight": _tensor(module.weight),
                },
            })
        elif isinstance(module, (nn.Softmax, nn.Dropout)):
            if isinstance(module, nn.Dropout):
                continue  # inference no-op
            layers.append({"kind": "softmax"})
        else:
            raise UnsupportedLayer(f"cannot export module {type(module).__name__}")
    return layers


def export_asnn(model: nn.Module, path, input_shape=(1, 28, 28), meta=None,
                append_softmax=True) -> None:
    """Write ``model`` to ``path`` in the ASNN container format.

    ``append_softmax`` adds the softmax output layer that the torch model
    leaves implicit (training against cross-entropy on logits).
    """
    model = model.eval()
    layers = module_to_layers(model)
    if append_softmax and (not layers or layers[-1]["kind"] != "softmax"):
        layers.append({"kind": "softmax"})

    entries = []
    payload = bytearray()
    offset = 0
    for layer in layers:
        entry = {k: v for k, v in layer.items() if k != "tensors"}
        tensors = layer.get("tensors")
        if tensors:
            entry["tensors"] = {}
            for name in sorted(tensors):
                arr = tensors[name]
                entry["tensors"][name] = {"offset": offset, "shape": list(arr.shape)}
                payload += arr.astype("<f4").tobytes()
                offset += arr.size * 4
        entries.append(entry)

    manifest = {
        "input_shape": list(input_shape),
        "layers": entries,
        "layout": "NCHW",
        "meta": dict(meta or {}),
    }
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        f.write(bytes(payload))
