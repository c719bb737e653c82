"""Minimal CPU inference engine with activation taps, plus a small MLP trainer.

Layers operate on float32 arrays laid out (batch, height, width, channels)
or (batch, features); products and statistics are accumulated in float64
and cast back. The layer vocabulary is exactly what MLPs and
ResNet-style CNNs need; models are flat, topologically ordered lists in
which each layer reads the output of the previous one unless it names an
explicit ``source`` index (-1 meaning the model input), and
``residual_add`` additionally reads a ``shortcut`` index.

Named tap points record layer outputs during :func:`forward`; they are the
sites where correction layers can be retrofitted with
:func:`attach_correction`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .correction import CorrectionConfig, correct
from .errors import (
    DivergenceDetectedError,
    GroupMismatchError,
    NonPositiveVarianceError,
    ShapeMismatchError,
    SizeMismatchError,
    UnknownLayerError,
    UnknownTapError,
)
from .otcore import TargetDistribution

__all__ = [
    "Layer",
    "Model",
    "MLPSpec",
    "TrainConfig",
    "forward",
    "predict",
    "conv2d",
    "batchnorm_infer",
    "groupnorm",
    "frn",
    "maxpool",
    "attach_correction",
    "output_shapes",
    "train_mlp",
    "init_mlp_params",
    "mlp_loss_and_grads",
]

LAYER_KINDS = (
    "dense",
    "conv2d",
    "relu",
    "batchnorm",
    "groupnorm",
    "frn",
    "maxpool",
    "global_avg_pool",
    "residual_add",
    "flatten",
    "correction",
)


@dataclass
class Layer:
    """One node of the flat execution list.

    ``params`` holds the kind-specific arrays and scalars. ``source`` is
    the index of the layer whose output feeds this one (None = previous
    layer, -1 = model input); ``shortcut`` is the second input of
    ``residual_add``.
    """

    kind: str
    params: dict = field(default_factory=dict)
    name: str | None = None
    source: int | None = None
    shortcut: int | None = None

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ShapeMismatchError(f"unknown layer kind '{self.kind}'")


@dataclass
class Model:
    layers: list
    input_shape: tuple
    taps: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.input_shape = tuple(int(d) for d in self.input_shape)
        if len(self.taps) != len(set(self.taps)):
            raise ShapeMismatchError("tap names must be unique")


def _pair(v):
    if isinstance(v, (list, tuple)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def _same_pads(size: int, k: int, s: int) -> tuple[int, int, int]:
    out = -(-size // s)  # ceil
    total = max((out - 1) * s + k - size, 0)
    lo = total // 2
    return out, lo, total - lo


def conv2d(x, kernel, bias=None, stride=1, padding="same") -> np.ndarray:
    """Cross-correlate (B,H,W,Cin) input with a (kh,kw,Cin,Cout) kernel.

    "same" pads with zeros so the output spatial size is ceil(in/stride),
    padding more on the bottom/right when the total is odd.
    """
    x = np.asarray(x)
    kernel = np.asarray(kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeMismatchError(
            f"conv2d expects 4D input/kernel, got {x.shape} and {kernel.shape}"
        )
    b, h, w, cin = x.shape
    kh, kw, kcin, cout = kernel.shape
    if kcin != cin:
        raise ShapeMismatchError(f"kernel expects {kcin} channels, input has {cin}")
    sy, sx = _pair(stride)
    if sy < 1 or sx < 1:
        raise ShapeMismatchError("stride must be >= 1")
    if padding == "same":
        out_h, pt, pb = _same_pads(h, kh, sy)
        out_w, pl, pr = _same_pads(w, kw, sx)
        xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    elif padding == "valid":
        if h < kh or w < kw:
            raise ShapeMismatchError("input smaller than kernel under valid padding")
        out_h = (h - kh) // sy + 1
        out_w = (w - kw) // sx + 1
        xp = x
    else:
        raise ShapeMismatchError(f"unknown padding mode '{padding}'")

    xp = xp.astype(np.float64, copy=False)
    k64 = kernel.astype(np.float64, copy=False)
    acc = np.zeros((b, out_h, out_w, cout), dtype=np.float64)
    for dy in range(kh):
        ys = slice(dy, dy + (out_h - 1) * sy + 1, sy)
        for dx in range(kw):
            xs = slice(dx, dx + (out_w - 1) * sx + 1, sx)
            acc += xp[:, ys, xs, :] @ k64[dy, dx]
    if bias is not None:
        acc += np.asarray(bias, dtype=np.float64)
    return acc.astype(np.float32)


def batchnorm_infer(x, gamma, beta, mean, var, eps=1e-5) -> np.ndarray:
    """Per-channel affine standardization with frozen statistics."""
    var = np.asarray(var, dtype=np.float64)
    if np.any(var <= 0):
        raise NonPositiveVarianceError("batchnorm running variance must be > 0")
    if eps <= 0:
        raise NonPositiveVarianceError("eps must be > 0")
    x64 = np.asarray(x, dtype=np.float64)
    scale = np.asarray(gamma, dtype=np.float64) / np.sqrt(var + eps)
    shift = np.asarray(beta, dtype=np.float64) - np.asarray(mean, np.float64) * scale
    return (x64 * scale + shift).astype(np.float32)


def groupnorm(x, groups, gamma, beta, eps=1e-5) -> np.ndarray:
    """Standardize each (sample, channel-group) slice, then apply the affine."""
    x = np.asarray(x)
    c = x.shape[-1]
    groups = int(groups)
    if groups < 1 or c % groups != 0:
        raise GroupMismatchError(f"{groups} groups do not divide {c} channels")
    if eps <= 0:
        raise GroupMismatchError("eps must be > 0")
    x64 = x.astype(np.float64)
    grouped = x64.reshape(x.shape[0], -1, groups, c // groups)
    mu = grouped.mean(axis=(1, 3), keepdims=True)
    var = ((grouped - mu) ** 2).mean(axis=(1, 3), keepdims=True)
    normed = ((grouped - mu) / np.sqrt(var + eps)).reshape(x.shape)
    out = normed * np.asarray(gamma, np.float64) + np.asarray(beta, np.float64)
    return out.astype(np.float32)


def frn(x, gamma, beta, tau, eps=1e-6) -> np.ndarray:
    """Filter response normalization followed by a thresholded linear unit.

    nu2 is the mean square over the spatial extent of each (sample,
    channel); the output is max(gamma*x/sqrt(nu2+eps) + beta, tau).
    """
    x = np.asarray(x)
    x64 = x.astype(np.float64)
    if x.ndim == 4:
        nu2 = np.mean(x64 * x64, axis=(1, 2), keepdims=True)
    else:
        nu2 = x64 * x64
    y = x64 / np.sqrt(nu2 + eps)
    y = y * np.asarray(gamma, np.float64) + np.asarray(beta, np.float64)
    return np.maximum(y, np.asarray(tau, np.float64)).astype(np.float32)


def maxpool(x, size=2, stride=None) -> np.ndarray:
    """Max over non-overlapping (or strided) windows, valid padding."""
    x = np.asarray(x)
    if x.ndim != 4:
        raise ShapeMismatchError("maxpool expects (B,H,W,C) input")
    py, px = _pair(size)
    sy, sx = _pair(stride) if stride is not None else (py, px)
    b, h, w, c = x.shape
    if h < py or w < px:
        raise ShapeMismatchError("input smaller than pooling window")
    out_h = (h - py) // sy + 1
    out_w = (w - px) // sx + 1
    out = None
    for dy in range(py):
        ys = slice(dy, dy + (out_h - 1) * sy + 1, sy)
        for dx in range(px):
            xs = slice(dx, dx + (out_w - 1) * sx + 1, sx)
            win = x[:, ys, xs, :]
            out = win if out is None else np.maximum(out, win)
    return out


def _apply_layer(layer: Layer, x: np.ndarray, inputs: list, model_input) -> np.ndarray:
    p = layer.params
    kind = layer.kind
    if kind == "dense":
        w = p["weight"]
        if x.ndim != 2 or x.shape[1] != w.shape[1]:
            raise ShapeMismatchError(
                f"dense expects (B,{w.shape[1]}) input, got {x.shape}"
            )
        y = x.astype(np.float64) @ w.astype(np.float64).T
        if p.get("bias") is not None:
            y += np.asarray(p["bias"], np.float64)
        return y.astype(np.float32)
    if kind == "conv2d":
        return conv2d(
            x,
            p["kernel"],
            bias=p.get("bias"),
            stride=p.get("stride", 1),
            padding=p.get("padding", "same"),
        )
    if kind == "relu":
        return np.maximum(x, 0)
    if kind == "batchnorm":
        return batchnorm_infer(
            x, p["gamma"], p["beta"], p["mean"], p["var"], p.get("eps", 1e-5)
        )
    if kind == "groupnorm":
        return groupnorm(x, p["groups"], p["gamma"], p["beta"], p.get("eps", 1e-5))
    if kind == "frn":
        return frn(x, p["gamma"], p["beta"], p["tau"], p.get("eps", 1e-6))
    if kind == "maxpool":
        return maxpool(x, p.get("size", 2), p.get("stride"))
    if kind == "global_avg_pool":
        if x.ndim != 4:
            raise ShapeMismatchError("global_avg_pool expects (B,H,W,C) input")
        return np.mean(x, axis=(1, 2), dtype=np.float64).astype(np.float32)
    if kind == "flatten":
        return np.ascontiguousarray(x).reshape(x.shape[0], -1)
    if kind == "residual_add":
        if layer.shortcut is None:
            raise ShapeMismatchError("residual_add requires a shortcut index")
        other = model_input if layer.shortcut == -1 else inputs[layer.shortcut]
        if other.shape != x.shape:
            raise ShapeMismatchError(
                f"residual_add shapes differ: {x.shape} vs {other.shape}"
            )
        return x + other
    if kind == "correction":
        target: TargetDistribution = p["target"]
        cfg: CorrectionConfig = p["cfg"]
        flat = x.reshape(x.shape[0], -1)
        if flat.shape[1] != target.n:
            raise SizeMismatchError(
                f"correction layer '{layer.name}': activation size {flat.shape[1]} "
                f"!= target n {target.n}"
            )
        out = np.stack([correct(row, target, cfg) for row in flat])
        return out.reshape(x.shape).astype(np.float32)
    raise ShapeMismatchError(f"unknown layer kind '{kind}'")


def forward(model: Model, x, taps=None):
    """Run the model on a batch; returns (logits, {tap name: activation}).

    ``taps`` selects which of the model's tap points to record (None =
    none). Asking for an undefined tap raises UnknownTapError.
    """
    x = np.asarray(x, dtype=np.float32)
    if x.shape[1:] != model.input_shape:
        raise ShapeMismatchError(
            f"input shape {x.shape[1:]} != model input {model.input_shape}"
        )
    wanted = set(taps) if taps else set()
    for name in wanted:
        if name not in model.taps:
            raise UnknownTapError(name)

    outputs: list[np.ndarray] = []
    cur = x
    for i, layer in enumerate(model.layers):
        if layer.source is None:
            inp = x if i == 0 else outputs[i - 1]
        elif layer.source == -1:
            inp = x
        else:
            inp = outputs[layer.source]
        cur = _apply_layer(layer, inp, outputs, x)
        outputs.append(cur)

    tapped = {name: outputs[model.taps[name]] for name in wanted}
    return cur, tapped


def predict(model: Model, x, batch_size: int = 256) -> np.ndarray:
    """Argmax class per sample, evaluated in batches."""
    x = np.asarray(x, dtype=np.float32)
    preds = np.empty(len(x), dtype=np.int64)
    for lo in range(0, len(x), batch_size):
        logits, _ = forward(model, x[lo : lo + batch_size])
        preds[lo : lo + batch_size] = np.argmax(logits, axis=1)
    return preds


def _shape_after(layer: Layer, shape: tuple, shapes: list, input_shape: tuple) -> tuple:
    p = layer.params
    kind = layer.kind
    if kind == "dense":
        w = p["weight"]
        if len(shape) != 1 or shape[0] != w.shape[1]:
            raise ShapeMismatchError(f"dense weight {w.shape} vs input {shape}")
        return (w.shape[0],)
    if kind == "conv2d":
        if len(shape) != 3:
            raise ShapeMismatchError("conv2d needs (H,W,C) input")
        kh, kw, cin, cout = p["kernel"].shape
        if cin != shape[2]:
            raise ShapeMismatchError("conv2d channel mismatch")
        sy, sx = _pair(p.get("stride", 1))
        if p.get("padding", "same") == "same":
            return (-(-shape[0] // sy), -(-shape[1] // sx), cout)
        return ((shape[0] - kh) // sy + 1, (shape[1] - kw) // sx + 1, cout)
    if kind == "maxpool":
        py, px = _pair(p.get("size", 2))
        sy, sx = _pair(p.get("stride")) if p.get("stride") is not None else (py, px)
        return ((shape[0] - py) // sy + 1, (shape[1] - px) // sx + 1, shape[2])
    if kind == "global_avg_pool":
        return (shape[2],)
    if kind == "flatten":
        return (int(np.prod(shape)),)
    if kind == "residual_add":
        other = input_shape if layer.shortcut == -1 else shapes[layer.shortcut]
        if tuple(other) != tuple(shape):
            raise ShapeMismatchError("residual_add shape mismatch")
        return shape
    return shape  # relu, norms, correction keep their input shape


def output_shapes(model: Model) -> list:
    """Per-sample output shape of every layer, validating consistency."""
    shapes: list[tuple] = []
    for i, layer in enumerate(model.layers):
        if layer.source is None:
            prev = model.input_shape if i == 0 else shapes[i - 1]
        elif layer.source == -1:
            prev = model.input_shape
        else:
            prev = shapes[layer.source]
        shapes.append(_shape_after(layer, tuple(prev), shapes, model.input_shape))
    return shapes


def attach_correction(
    model: Model,
    targets: dict,
    cfg: CorrectionConfig,
    placement: str = "after_relu",
) -> Model:
    """Insert correction layers after the tap sites named in ``targets``.

    Returns a new model; the input model is untouched. Downstream layers
    (and shortcut references) that consumed a site's output consume the
    corrected output instead. With placement "after_conv" the sparsity
    restoration is disabled, since pre-activation values carry no exact
    zeros to preserve.
    """
    if placement not in ("after_relu", "after_conv"):
        raise ValueError(f"unknown placement '{placement}'")
    if not targets:
        return Model(
            layers=list(model.layers),
            input_shape=model.input_shape,
            taps=dict(model.taps),
            metadata=dict(model.metadata),
        )
    shapes = output_shapes(model)
    sites = {}
    for layer_id, target in targets.items():
        if layer_id not in model.taps:
            raise UnknownLayerError(layer_id)
        idx = model.taps[layer_id]
        n_site = int(np.prod(shapes[idx]))
        if target.n != n_site:
            raise SizeMismatchError(
                f"site '{layer_id}' has {n_site} activations, target has {target.n}"
            )
        sites[idx] = (layer_id, target)
    if placement == "after_conv":
        cfg = replace(cfg, preserve_zeros=False)

    site_indices = sorted(sites)
    # new index of old layer i, accounting for insertions before it
    def remap(i: int) -> int:
        return i + sum(1 for s in site_indices if s < i)

    # consumers of a corrected site read the correction layer instead
    def remap_ref(i):
        if i is None or i == -1:
            return i
        return remap(i) + (1 if i in sites else 0)

    new_layers: list[Layer] = []
    new_taps = {name: remap(idx) for name, idx in model.taps.items()}
    for i, layer in enumerate(model.layers):
        new_layers.append(
            replace(layer, source=remap_ref(layer.source), shortcut=remap_ref(layer.shortcut))
        )
        if i in sites:
            layer_id, target = sites[i]
            corr_name = f"{layer_id}:corrected"
            new_layers.append(
                Layer(
                    kind="correction",
                    params={"target": target, "cfg": cfg},
                    name=corr_name,
                    source=remap(i),
                )
            )
            new_taps[corr_name] = remap(i) + 1
    return Model(
        layers=new_layers,
        input_shape=model.input_shape,
        taps=new_taps,
        metadata=dict(model.metadata),
    )


# ---------------------------------------------------------------------------
# MLP trainer (dense + optional batchnorm + relu, softmax cross-entropy, SGD)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MLPSpec:
    hidden: tuple
    norm: str = "none"  # "none" or "bn"
    classes: int = 10

    def __post_init__(self):
        if self.norm not in ("none", "bn"):
            raise ValueError(f"unsupported norm '{self.norm}' for the MLP trainer")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.1
    momentum: float = 0.9
    epochs: int = 20
    batch_size: int = 64
    decay_epochs: tuple = ()
    decay_factor: float = 0.1
    seed: int = 0
    val_fraction: float = 0.1
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5


def init_mlp_params(spec: MLPSpec, d_in: int, seed: int) -> list:
    """Fan-in-scaled uniform init; float64 internally for exact gradients."""
    rng = np.random.Generator(np.random.PCG64(seed))
    params = []
    sizes = [d_in, *spec.hidden, spec.classes]
    for k in range(len(sizes) - 1):
        limit = 1.0 / math.sqrt(sizes[k])
        block = {
            "W": rng.uniform(-limit, limit, size=(sizes[k + 1], sizes[k])),
            "b": np.zeros(sizes[k + 1]),
        }
        if spec.norm == "bn" and k < len(sizes) - 2:
            block["gamma"] = np.ones(sizes[k + 1])
            block["beta"] = np.zeros(sizes[k + 1])
            block["run_mean"] = np.zeros(sizes[k + 1])
            block["run_var"] = np.ones(sizes[k + 1])
        params.append(block)
    return params


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def mlp_loss_and_grads(params, xb, yb, spec: MLPSpec, cfg: TrainConfig, update_running=False):
    """Mean cross-entropy over the batch and gradients for every parameter.

    Hidden blocks run dense -> (train-mode batchnorm) -> relu; the last
    block is the classifier head. Returns (loss, grads) with grads shaped
    like ``params``.
    """
    b = len(xb)
    cache = []
    h = xb
    for k, blk in enumerate(params):
        z = h @ blk["W"].T + blk["b"]
        entry = {"h_in": h, "z": z}
        if k < len(params) - 1:
            u = z
            if "gamma" in blk:
                mu = u.mean(axis=0)
                var = ((u - mu) ** 2).mean(axis=0)
                inv_std = 1.0 / np.sqrt(var + cfg.bn_eps)
                xhat = (u - mu) * inv_std
                u = blk["gamma"] * xhat + blk["beta"]
                entry.update(xhat=xhat, inv_std=inv_std)
                if update_running:
                    m = cfg.bn_momentum
                    blk["run_mean"] = (1 - m) * blk["run_mean"] + m * mu
                    blk["run_var"] = (1 - m) * blk["run_var"] + m * var
            entry["pre_relu"] = u
            h = np.maximum(u, 0)
            entry["h_out"] = h
        cache.append(entry)

    logits = cache[-1]["z"]
    probs = _softmax(logits)
    eps = 1e-12
    loss = -float(np.mean(np.log(probs[np.arange(b), yb] + eps)))

    grads = [dict() for _ in params]
    dz = probs.copy()
    dz[np.arange(b), yb] -= 1.0
    dz /= b
    for k in range(len(params) - 1, -1, -1):
        blk, entry = params[k], cache[k]
        if k < len(params) - 1:
            d = dz * (entry["pre_relu"] > 0)
            if "gamma" in blk:
                xhat, inv_std = entry["xhat"], entry["inv_std"]
                grads[k]["gamma"] = np.sum(d * xhat, axis=0)
                grads[k]["beta"] = np.sum(d, axis=0)
                dxhat = d * blk["gamma"]
                n = d.shape[0]
                d = (
                    inv_std
                    / n
                    * (
                        n * dxhat
                        - dxhat.sum(axis=0)
                        - xhat * np.sum(dxhat * xhat, axis=0)
                    )
                )
            dz = d
        grads[k]["W"] = dz.T @ entry["h_in"]
        grads[k]["b"] = dz.sum(axis=0)
        if k > 0:
            dz = dz @ blk["W"]
    return loss, grads


def _params_to_model(params, spec: MLPSpec, input_shape, cfg: TrainConfig) -> Model:
    layers: list[Layer] = []
    taps = {}
    if len(input_shape) > 1:
        layers.append(Layer(kind="flatten", name="pixels"))
        taps["pixels"] = 0
    for k, blk in enumerate(params):
        layers.append(
            Layer(
                kind="dense",
                params={
                    "weight": blk["W"].astype(np.float32),
                    "bias": blk["b"].astype(np.float32),
                },
            )
        )
        if k < len(params) - 1:
            if "gamma" in blk:
                layers.append(
                    Layer(
                        kind="batchnorm",
                        params={
                            "gamma": blk["gamma"].astype(np.float32),
                            "beta": blk["beta"].astype(np.float32),
                            "mean": blk["run_mean"].astype(np.float32),
                            "var": blk["run_var"].astype(np.float32),
                            "eps": cfg.bn_eps,
                        },
                    )
                )
            name = f"relu{k + 1}"
            layers.append(Layer(kind="relu", name=name))
            taps[name] = len(layers) - 1
    return Model(layers=layers, input_shape=tuple(input_shape), taps=taps)


def train_mlp(train_set, spec: MLPSpec, cfg: TrainConfig):
    """Train a dense network with SGD + momentum; deterministic given the seed.

    ``train_set`` is an (inputs, labels) pair; inputs may be images (they
    are flattened internally and the returned model starts with a flatten
    layer). Returns (model, metrics) where metrics carries the final
    train/validation accuracy.
    """
    x, y = train_set
    x = np.asarray(x)
    y = np.asarray(y, dtype=np.int64)
    if len(x) == 0:
        raise ValueError("training set is empty")
    if y.min() < 0 or y.max() >= spec.classes:
        raise ValueError("labels out of range for the declared class count")
    input_shape = x.shape[1:]
    flat = x.reshape(len(x), -1).astype(np.float64)

    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    perm = rng.permutation(len(flat))
    n_val = int(round(cfg.val_fraction * len(flat)))
    val_idx, train_idx = perm[:n_val], perm[n_val:]
    xt, yt = flat[train_idx], y[train_idx]
    xv, yv = flat[val_idx], y[val_idx]

    params = init_mlp_params(spec, flat.shape[1], cfg.seed)
    velocity = [
        {k: np.zeros_like(v) for k, v in blk.items() if k in ("W", "b", "gamma", "beta")}
        for blk in params
    ]
    lr = cfg.lr
    for epoch in range(cfg.epochs):
        if epoch in cfg.decay_epochs:
            lr *= cfg.decay_factor
        order = rng.permutation(len(xt))
        for lo in range(0, len(xt), cfg.batch_size):
            idx = order[lo : lo + cfg.batch_size]
            loss, grads = mlp_loss_and_grads(
                params, xt[idx], yt[idx], spec, cfg, update_running=True
            )
            if not np.isfinite(loss):
                raise DivergenceDetectedError(
                    f"loss became non-finite at epoch {epoch}, batch {lo // cfg.batch_size}"
                    f" (lr={lr})"
                )
            for blk, vel, g in zip(params, velocity, grads):
                for key, grad in g.items():
                    vel[key] = cfg.momentum * vel[key] - lr * grad
                    blk[key] = blk[key] + vel[key]

    model = _params_to_model(params, spec, input_shape, cfg)

    def acc(ax, ay):
        if len(ax) == 0:
            return float("nan")
        preds = predict(model, ax.reshape(-1, *input_shape).astype(np.float32))
        return float(np.mean(preds == ay))

    metrics = {"train_accuracy": acc(xt, yt), "val_accuracy": acc(xv, yv)}
    return model, metrics
