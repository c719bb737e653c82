"""Translate trained torch CNNs into engine model archives.

The exported flat layer list uses the engine vocabulary (conv2d,
batchnorm, groupnorm, frn, relu, maxpool, global_avg_pool, dense,
residual_add). Kernels are transposed from torch's (out,in,kh,kw) to
the channels-last (kh,kw,in,out) layout; every torch parameter lands in
exactly one layer slot and is listed in the embedded manifest. A fixed
probe batch and its framework logits ship in a sidecar .npz so the
engine side can verify parity without torch.
"""

from __future__ import annotations

import hashlib

import numpy as np
import torch
from torch import nn

from .archive import PayloadBuilder, write_dataset_archive, write_model_archive
from .errors import UnsupportedLayerError
from .models import Conv2dSame, FilterResponseNorm2d, GlobalAvgPool, SmallResNet


def _f32(t: torch.Tensor) -> np.ndarray:
    return t.detach().cpu().numpy().astype(np.float32)


class _LayerList:
    """Collects layer entries, payload tensors, and manifest rows."""

    def __init__(self):
        self.entries: list[dict] = []
        self.builder = PayloadBuilder()
        self.tensor_rows: list[dict] = []

    def add(self, kind, *, name=None, source=None, shortcut=None, scalars=None, tensors=None) -> int:
        index = len(self.entries)
        tensor_entries = {}
        for param, arr in (tensors or {}).items():
            arr = np.ascontiguousarray(arr, dtype=np.float32)
            tensor_entries[param] = self.builder.add(arr, "f32")
            self.tensor_rows.append(
                {"layer": index, "kind": kind, "param": param, "shape": list(arr.shape)}
            )
        self.entries.append(
            {
                "kind": kind,
                "name": name,
                "source": source,
                "shortcut": shortcut,
                "scalars": scalars or {},
                "tensors": tensor_entries,
            }
        )
        return index


def _conv_padding(mod: nn.Conv2d) -> str:
    if isinstance(mod, Conv2dSame):
        return "same"
    kh, kw = mod.kernel_size
    ph, pw = mod.padding if isinstance(mod.padding, tuple) else (mod.padding, mod.padding)
    if (ph, pw) == (0, 0):
        return "valid"
    if mod.stride == (1, 1) and 2 * ph == kh - 1 and 2 * pw == kw - 1:
        return "same"
    raise UnsupportedLayerError(
        f"conv padding {mod.padding} with stride {mod.stride} has no engine equivalent"
    )


def _add_conv(ll: _LayerList, mod: nn.Conv2d, source=None, name=None) -> int:
    if mod.dilation != (1, 1) or mod.groups != 1:
        raise UnsupportedLayerError("dilated or grouped convolutions are not exportable")
    padding = _conv_padding(mod)
    tensors = {"kernel": _f32(mod.weight).transpose(2, 3, 1, 0)}
    if mod.bias is not None:
        tensors["bias"] = _f32(mod.bias)
    scalars = {"stride": [int(mod.stride[0]), int(mod.stride[1])], "padding": padding}
    return ll.add("conv2d", name=name, source=source, scalars=scalars, tensors=tensors)


def _add_norm(ll: _LayerList, mod: nn.Module, source=None, name=None) -> int:
    if isinstance(mod, nn.BatchNorm2d):
        tensors = {
            "gamma": _f32(mod.weight),
            "beta": _f32(mod.bias),
            "mean": _f32(mod.running_mean),
            "var": _f32(mod.running_var),
        }
        return ll.add(
            "batchnorm", name=name, source=source, scalars={"eps": float(mod.eps)}, tensors=tensors
        )
    if isinstance(mod, nn.GroupNorm):
        tensors = {"gamma": _f32(mod.weight), "beta": _f32(mod.bias)}
        scalars = {"groups": int(mod.num_groups), "eps": float(mod.eps)}
        return ll.add("groupnorm", name=name, source=source, scalars=scalars, tensors=tensors)
    if isinstance(mod, FilterResponseNorm2d):
        tensors = {
            "gamma": _f32(mod.gamma).reshape(-1),
            "beta": _f32(mod.beta).reshape(-1),
            "tau": _f32(mod.tau).reshape(-1),
        }
        return ll.add(
            "frn", name=name, source=source, scalars={"eps": float(mod.eps)}, tensors=tensors
        )
    raise UnsupportedLayerError(f"cannot export norm module {type(mod).__name__}")


def _add_any(ll: _LayerList, mod: nn.Module) -> int:
    if isinstance(mod, nn.Conv2d):
        return _add_conv(ll, mod)
    if isinstance(mod, (nn.BatchNorm2d, nn.GroupNorm, FilterResponseNorm2d)):
        return _add_norm(ll, mod)
    if isinstance(mod, nn.ReLU):
        return ll.add("relu")
    if isinstance(mod, nn.MaxPool2d):
        if mod.padding not in (0, (0, 0)) or mod.dilation not in (1, (1, 1)) or mod.ceil_mode:
            raise UnsupportedLayerError("padded, dilated, or ceil-mode pooling is not exportable")
        size = mod.kernel_size if isinstance(mod.kernel_size, tuple) else (mod.kernel_size,) * 2
        stride = mod.stride if isinstance(mod.stride, tuple) else (mod.stride,) * 2
        scalars = {"size": [int(size[0]), int(size[1])], "stride": [int(stride[0]), int(stride[1])]}
        return ll.add("maxpool", scalars=scalars)
    if isinstance(mod, GlobalAvgPool):
        return ll.add("global_avg_pool")
    if isinstance(mod, nn.Linear):
        tensors = {"weight": _f32(mod.weight)}
        if mod.bias is not None:
            tensors["bias"] = _f32(mod.bias)
        return ll.add("dense", tensors=tensors)
    raise UnsupportedLayerError(f"cannot export module {type(mod).__name__}")


def _add_block(ll: _LayerList, block, input_index: int, prefix: str) -> int:
    _add_conv(ll, block.conv1, name=f"{prefix}.conv1")
    last = _add_norm(ll, block.n1)
    if block.uses_relu:
        last = ll.add("relu")
    _add_conv(ll, block.conv2, name=f"{prefix}.conv2")
    main = _add_norm(ll, block.n2)
    if block.down is not None:
        _add_conv(ll, block.down, source=input_index, name=f"{prefix}.down")
        shortcut = _add_norm(ll, block.down_norm)
    else:
        shortcut = input_index
    last = ll.add("residual_add", source=main, shortcut=shortcut)
    if block.uses_relu:
        last = ll.add("relu", name=prefix)
    return last


def model_to_layers(net: nn.Module):
    """Flatten a supported torch model; returns (_LayerList, taps)."""
    if isinstance(net, SmallResNet):
        ll = _LayerList()
        _add_conv(ll, net.stem, name="stem.conv")
        last = _add_norm(ll, net.n0)
        if net.spec.norm != "frn":
            last = ll.add("relu", name="stem")
        taps = {"stem": last}
        taps["block1"] = _add_block(ll, net.block1, taps["stem"], "block1")
        taps["block2"] = _add_block(ll, net.block2, taps["block1"], "block2")
        ll.add("global_avg_pool")
        ll.add("dense", tensors={"weight": _f32(net.head.weight), "bias": _f32(net.head.bias)})
        return ll, taps
    if isinstance(net, nn.Sequential):
        ll = _LayerList()
        for mod in net:
            _add_any(ll, mod)
        return ll, {}
    raise UnsupportedLayerError(f"cannot export model type {type(net).__name__}")


def _probe_logits(net: nn.Module, probe: np.ndarray, batch_size: int = 256) -> np.ndarray:
    x = torch.from_numpy(probe).permute(0, 3, 1, 2).contiguous()
    chunks = []
    net.eval()
    with torch.no_grad():
        for lo in range(0, len(x), batch_size):
            chunks.append(net(x[lo : lo + batch_size]).numpy().astype(np.float32))
    return np.concatenate(chunks, axis=0)


def _describe(net: nn.Module) -> dict:
    if isinstance(net, SmallResNet):
        s = net.spec
        return {
            "family": "small_resnet",
            "width": s.width,
            "norm": s.norm,
            "classes": s.classes,
            "groups": s.groups,
            "in_channels": s.in_channels,
        }
    return {"family": "sequential", "modules": [type(m).__name__ for m in net]}


def export_model(
    net: nn.Module,
    input_shape,
    path,
    probe=None,
    dataset: str = "",
    training: dict | None = None,
    clean_accuracy: float | None = None,
    provenance: dict | None = None,
) -> dict:
    """Write a .dwm archive (manifest embedded) plus a .probe.npz sidecar.

    ``probe`` is an optional (M,H,W,C) float32 batch; its framework
    logits are computed here and shipped alongside for parity checks.
    Returns the manifest dict.
    """
    net.eval()
    ll, taps = model_to_layers(net)
    manifest = {
        "architecture": _describe(net),
        "tensors": ll.tensor_rows,
        "training": dict(training or {}),
        "dataset": dataset,
        "clean_accuracy": None if clean_accuracy is None else float(clean_accuracy),
        "framework": f"torch-{torch.__version__}",
    }
    if probe is not None:
        probe = np.ascontiguousarray(probe, dtype=np.float32)
        logits = _probe_logits(net, probe)
        # sidecar name is derived from the archive path, so the manifest
        # stays identical when the same checkpoint is exported elsewhere
        np.savez(str(path) + ".probe.npz", images=probe, logits=logits)
        manifest["probe"] = {
            "count": int(len(probe)),
            "logits_sha256": hashlib.sha256(logits.tobytes()).hexdigest(),
        }
    write_model_archive(
        path, input_shape, ll.entries, taps, manifest, provenance, ll.builder.bytes()
    )
    return manifest


def export_dataset(path, images, labels, corruption: str | None = None, provenance: dict | None = None) -> None:
    """Write a .dwd archive; ``corruption`` tags pre-corrupted passthroughs."""
    prov = dict(provenance or {})
    if corruption is not None:
        prov["corruption"] = corruption
    write_dataset_archive(path, images, labels, provenance=prov)
