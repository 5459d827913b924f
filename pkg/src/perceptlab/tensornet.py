"""Minimal differentiable network core.

Dense and convolutional layers on numpy arrays, forward pass, reverse-mode
gradients with respect to both weights and input pixels, and plain SGD
updates. Models are small sequential stacks described by a NetworkSpec;
weights live in one flat array so checkpointing and optimizer steps stay
trivial. Inference never mutates the model, so a shared read-only model is
safe to use from several threads; training mutates weights in place and is
single-writer.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from typing import Iterable, Sequence, Union

import numpy as np

__all__ = [
    "ShapeError",
    "NonFiniteError",
    "Conv",
    "Dense",
    "Relu",
    "AvgPool",
    "Flatten",
    "NetworkSpec",
    "GuideModel",
    "GtLogitObjective",
    "CrossEntropyObjective",
    "default_spec",
    "forward",
    "forward_features",
    "input_gradient",
    "input_gradient_batch",
    "objective_value",
    "softmax",
    "cross_entropy_loss",
    "sgd_epoch",
    "save_checkpoint",
    "load_checkpoint",
]


class ShapeError(ValueError):
    """Raised when an input does not match the shape a model expects."""


class NonFiniteError(FloatingPointError):
    """Raised when a forward/backward pass or update produces NaN or Inf."""


# --------------------------------------------------------------------------
# Layer descriptors


@dataclass(frozen=True)
class Conv:
    kernel: int
    channels: int
    stride: int = 1
    padding: int = 0


@dataclass(frozen=True)
class Dense:
    width: int


@dataclass(frozen=True)
class Relu:
    pass


@dataclass(frozen=True)
class AvgPool:
    size: int


@dataclass(frozen=True)
class Flatten:
    pass


LayerSpec = Union[Conv, Dense, Relu, AvgPool, Flatten]

_LAYER_KINDS = {"conv": Conv, "dense": Dense, "relu": Relu, "avgpool": AvgPool, "flatten": Flatten}


@dataclass(frozen=True)
class NetworkSpec:
    """Ordered layer stack plus the input/output contract of the classifier."""

    input_shape: tuple[int, int, int]  # (H, W, C)
    layers: tuple[LayerSpec, ...]
    class_count: int

    def __post_init__(self):
        if self.class_count < 2:
            raise ValueError(f"class_count must be >= 2, got {self.class_count}")
        shapes = self.activation_shapes()
        out = shapes[-1]
        if out != (self.class_count,):
            raise ValueError(
                f"final layer output {out} does not match class_count {self.class_count}"
            )

    def activation_shapes(self) -> list[tuple[int, ...]]:
        """Shape after every layer, starting with the input shape."""
        shapes: list[tuple[int, ...]] = [tuple(self.input_shape)]
        cur = tuple(self.input_shape)
        for layer in self.layers:
            if isinstance(layer, Conv):
                if len(cur) != 3:
                    raise ValueError(f"conv layer applied to non-image shape {cur}")
                h, w, _ = cur
                oh = (h + 2 * layer.padding - layer.kernel) // layer.stride + 1
                ow = (w + 2 * layer.padding - layer.kernel) // layer.stride + 1
                if oh < 1 or ow < 1:
                    raise ValueError(f"conv kernel {layer.kernel} too large for input {cur}")
                cur = (oh, ow, layer.channels)
            elif isinstance(layer, AvgPool):
                h, w, c = cur
                if h % layer.size or w % layer.size:
                    raise ValueError(f"avgpool size {layer.size} does not divide {cur}")
                cur = (h // layer.size, w // layer.size, c)
            elif isinstance(layer, Flatten):
                cur = (int(np.prod(cur)),)
            elif isinstance(layer, Dense):
                if len(cur) != 1:
                    raise ValueError(f"dense layer applied to non-flat shape {cur}")
                cur = (layer.width,)
            elif isinstance(layer, Relu):
                pass
            else:
                raise TypeError(f"unknown layer spec {layer!r}")
            shapes.append(cur)
        return shapes

    def parameter_slots(self) -> list[tuple[LayerSpec, tuple[tuple[int, ...], ...]]]:
        """For each layer, the shapes of its weight arrays (possibly empty)."""
        slots = []
        shapes = self.activation_shapes()
        for layer, inp in zip(self.layers, shapes):
            if isinstance(layer, Conv):
                cin = inp[2]
                slots.append((layer, ((layer.kernel, layer.kernel, cin, layer.channels), (layer.channels,))))
            elif isinstance(layer, Dense):
                slots.append((layer, ((inp[0], layer.width), (layer.width,))))
            else:
                slots.append((layer, ()))
        return slots

    def parameter_count(self) -> int:
        return sum(
            int(np.prod(shape)) for _, shapes in self.parameter_slots() for shape in shapes
        )

    def to_dict(self) -> dict:
        layers = []
        for layer in self.layers:
            if isinstance(layer, Conv):
                layers.append({"kind": "conv", "kernel": layer.kernel, "channels": layer.channels,
                               "stride": layer.stride, "padding": layer.padding})
            elif isinstance(layer, Dense):
                layers.append({"kind": "dense", "width": layer.width})
            elif isinstance(layer, Relu):
                layers.append({"kind": "relu"})
            elif isinstance(layer, AvgPool):
                layers.append({"kind": "avgpool", "size": layer.size})
            elif isinstance(layer, Flatten):
                layers.append({"kind": "flatten"})
        return {"input_shape": list(self.input_shape), "layers": layers, "class_count": self.class_count}

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        layers = []
        for entry in d["layers"]:
            kind = entry["kind"]
            if kind == "conv":
                layers.append(Conv(entry["kernel"], entry["channels"], entry["stride"], entry["padding"]))
            elif kind == "dense":
                layers.append(Dense(entry["width"]))
            elif kind == "relu":
                layers.append(Relu())
            elif kind == "avgpool":
                layers.append(AvgPool(entry["size"]))
            elif kind == "flatten":
                layers.append(Flatten())
            else:
                raise ValueError(f"unknown layer kind {kind!r}")
        return cls(tuple(d["input_shape"]), tuple(layers), d["class_count"])


def default_spec(class_count: int, input_shape: tuple[int, int, int] = (32, 32, 3)) -> NetworkSpec:
    """Desk-scale architecture: two strided 3x3 conv blocks and a dense head."""
    return NetworkSpec(
        input_shape=input_shape,
        layers=(
            Conv(kernel=3, channels=16, stride=2, padding=1),
            Relu(),
            Conv(kernel=3, channels=32, stride=2, padding=1),
            Relu(),
            Flatten(),
            Dense(class_count),
        ),
        class_count=class_count,
    )


# --------------------------------------------------------------------------
# Model


@dataclass
class GuideModel:
    """A sequential classifier: spec, flat weight vector, input normalization.

    Normalization (per-channel mean/std of the training split) is applied
    inside the forward pass so input gradients are taken in raw [0,1] pixel
    space.
    """

    spec: NetworkSpec
    weights: np.ndarray
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        expected = self.spec.parameter_count()
        if self.weights.size != expected:
            raise ValueError(f"weight count {self.weights.size} != spec parameter count {expected}")
        self.weights = np.ascontiguousarray(self.weights)
        c = self.spec.input_shape[2]
        self.mean = np.asarray(self.mean, dtype=self.weights.dtype).reshape(c)
        self.std = np.asarray(self.std, dtype=self.weights.dtype).reshape(c)
        if np.any(self.std <= 0):
            raise ValueError("std entries must be positive")

    @property
    def dtype(self):
        return self.weights.dtype

    @property
    def class_count(self) -> int:
        return self.spec.class_count

    @classmethod
    def initialize(cls, spec: NetworkSpec, seed: int, dtype=np.float32,
                   mean: Sequence[float] | None = None,
                   std: Sequence[float] | None = None) -> "GuideModel":
        """Seeded uniform fan-in init: U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
        rng = np.random.default_rng(seed)
        chunks = []
        for layer, shapes in spec.parameter_slots():
            if not shapes:
                continue
            if isinstance(layer, Conv):
                fan_in = layer.kernel * layer.kernel * shapes[0][2]
            else:
                fan_in = shapes[0][0]
            bound = 1.0 / np.sqrt(fan_in)
            for shape in shapes:
                chunks.append(rng.uniform(-bound, bound, size=int(np.prod(shape))))
        weights = np.concatenate(chunks).astype(dtype) if chunks else np.zeros(0, dtype)
        c = spec.input_shape[2]
        mean = np.zeros(c) if mean is None else np.asarray(mean, dtype=np.float64)
        std = np.ones(c) if std is None else np.asarray(std, dtype=np.float64)
        return cls(spec, weights, mean.astype(dtype), std.astype(dtype))

    def parameter_views(self) -> list[tuple[np.ndarray, ...]]:
        """Per-layer views into the flat weight vector (empty tuples for
        parameterless layers)."""
        views = []
        offset = 0
        for _, shapes in self.spec.parameter_slots():
            layer_views = []
            for shape in shapes:
                n = int(np.prod(shape))
                layer_views.append(self.weights[offset:offset + n].reshape(shape))
                offset += n
            views.append(tuple(layer_views))
        return views

    def astype(self, dtype) -> "GuideModel":
        return GuideModel(self.spec, self.weights.astype(dtype),
                          self.mean.astype(dtype), self.std.astype(dtype))

    def copy(self) -> "GuideModel":
        return GuideModel(self.spec, self.weights.copy(), self.mean.copy(), self.std.copy())


# --------------------------------------------------------------------------
# Objectives for input gradients


@dataclass(frozen=True)
class GtLogitObjective:
    """L_gt minus alpha/(|C_task|-1) times the sum of competing task-class logits."""

    gt: int
    alpha: float = 0.0
    task_classes: tuple[int, ...] | None = None


@dataclass(frozen=True)
class CrossEntropyObjective:
    """Cross-entropy of the softmax prediction against the true class."""

    gt: int


Objective = Union[GtLogitObjective, CrossEntropyObjective]


def _objective_dlogits(objective: Objective, logits: np.ndarray) -> np.ndarray:
    """d(objective)/d(logits) for a batch of logits (N, K)."""
    n, k = logits.shape
    d = np.zeros_like(logits)
    if isinstance(objective, GtLogitObjective):
        gt = objective.gt
        if not (0 <= gt < k):
            raise ValueError(f"gt index {gt} out of range for {k} classes")
        d[:, gt] = 1.0
        if objective.alpha != 0.0:
            classes = objective.task_classes
            if classes is None:
                classes = tuple(range(k))
            competing = [c for c in classes if c != gt]
            if not competing:
                raise ValueError("alpha > 0 requires at least two task classes")
            d[:, competing] = -objective.alpha / len(competing)
    elif isinstance(objective, CrossEntropyObjective):
        gt = objective.gt
        if not (0 <= gt < k):
            raise ValueError(f"gt index {gt} out of range for {k} classes")
        p = softmax(logits)
        d[:] = p
        d[:, gt] -= 1.0
    else:
        raise TypeError(f"unknown objective {objective!r}")
    return d


def objective_value(objective: Objective, logits: np.ndarray) -> np.ndarray:
    """Scalar objective per batch row."""
    if logits.ndim == 1:
        logits = logits[None, :]
    if isinstance(objective, GtLogitObjective):
        val = logits[:, objective.gt].copy()
        if objective.alpha != 0.0:
            classes = objective.task_classes or tuple(range(logits.shape[1]))
            competing = [c for c in classes if c != objective.gt]
            if not competing:
                raise ValueError("alpha > 0 requires at least two task classes")
            val -= objective.alpha / len(competing) * logits[:, competing].sum(axis=1)
        return val
    if isinstance(objective, CrossEntropyObjective):
        logp = logits - _logsumexp(logits)
        return -logp[:, objective.gt]
    raise TypeError(f"unknown objective {objective!r}")


# --------------------------------------------------------------------------
# Forward / backward machinery


def _check_batch(model: GuideModel, images: np.ndarray) -> np.ndarray:
    if images.ndim != 4 or images.shape[1:] != model.spec.input_shape:
        raise ShapeError(
            f"expected batch of shape (N, {', '.join(map(str, model.spec.input_shape))}), "
            f"got {images.shape}"
        )
    lo, hi = float(images.min(initial=0.0)), float(images.max(initial=0.0))
    if lo < -1e-6 or hi > 1 + 1e-6:
        raise ValueError(f"pixel values must lie in [0,1], got range [{lo}, {hi}]")
    return np.ascontiguousarray(images, dtype=model.dtype)


def _conv_forward(x, w, b, stride, pad):
    n, h, wd, c = x.shape
    k = w.shape[0]
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(1, 2))
    win = win[:, ::stride, ::stride]  # (N, OH, OW, C, K, K)
    oh, ow = win.shape[1], win.shape[2]
    patches = win.transpose(0, 1, 2, 4, 5, 3).reshape(n, oh, ow, k * k * c)
    out = patches @ w.reshape(k * k * c, -1) + b
    return out, patches


def _conv_backward(dout, patches, w, x_shape, stride, pad):
    n, h, wd, c = x_shape
    k = w.shape[0]
    cout = w.shape[3]
    oh, ow = dout.shape[1], dout.shape[2]
    flat_dout = dout.reshape(-1, cout)
    dw = (patches.reshape(-1, k * k * c).T @ flat_dout).reshape(w.shape)
    db = flat_dout.sum(axis=0)
    dpatch = (flat_dout @ w.reshape(k * k * c, cout).T).reshape(n, oh, ow, k, k, c)
    hp, wp = h + 2 * pad, wd + 2 * pad
    dxp = np.zeros((n, hp, wp, c), dtype=dout.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, i:i + oh * stride:stride, j:j + ow * stride:stride, :] += dpatch[:, :, :, i, j, :]
    if pad:
        dxp = dxp[:, pad:pad + h, pad:pad + wd, :]
    return dxp, dw, db


def _run_forward(model: GuideModel, images: np.ndarray, caches: list | None = None):
    """Forward pass. When `caches` is a list it receives per-layer state needed
    for the backward pass; per-call storage keeps shared models read-only."""
    x = (images - model.mean) / model.std
    if caches is not None:
        caches.append(("normalize", None))
    views = model.parameter_views()
    penultimate = None
    for layer, layer_views in zip(model.spec.layers, views):
        if isinstance(layer, Conv):
            w, b = layer_views
            out, patches = _conv_forward(x, w, b, layer.stride, layer.padding)
            if caches is not None:
                caches.append(("conv", (patches, w, x.shape, layer.stride, layer.padding)))
            x = out
        elif isinstance(layer, Relu):
            mask = x > 0
            if caches is not None:
                caches.append(("relu", mask))
            x = x * mask
        elif isinstance(layer, AvgPool):
            nb, h, wd, c = x.shape
            p = layer.size
            if caches is not None:
                caches.append(("avgpool", (x.shape, p)))
            x = x.reshape(nb, h // p, p, wd // p, p, c).mean(axis=(2, 4))
        elif isinstance(layer, Flatten):
            if caches is not None:
                caches.append(("flatten", x.shape))
            x = x.reshape(x.shape[0], -1)
        elif isinstance(layer, Dense):
            w, b = layer_views
            penultimate = x
            if caches is not None:
                caches.append(("dense", (x, w)))
            x = x @ w + b
    if not np.all(np.isfinite(x)):
        raise NonFiniteError("forward pass produced non-finite logits")
    return x, penultimate


def _run_backward(model: GuideModel, caches: list, dout: np.ndarray,
                  want_weight_grads: bool):
    """Walk the cached layers in reverse. Returns (dinput, weight_grads)
    where weight_grads is a flat array aligned with model.weights (or None)."""
    grads = np.zeros_like(model.weights) if want_weight_grads else None
    grad_views = None
    if want_weight_grads:
        shadow = GuideModel(model.spec, grads, np.zeros_like(model.mean), np.ones_like(model.std))
        grad_views = shadow.parameter_views()
    d = dout
    layer_idx = len(model.spec.layers) - 1
    for kind, cache in reversed(caches):
        if kind == "normalize":
            d = d / model.std
            continue
        layer = model.spec.layers[layer_idx]
        if kind == "conv":
            patches, w, x_shape, stride, pad = cache
            d, dw, db = _conv_backward(d, patches, w, x_shape, stride, pad)
            if want_weight_grads:
                gw, gb = grad_views[layer_idx]
                gw += dw
                gb += db
        elif kind == "relu":
            d = d * cache
        elif kind == "avgpool":
            x_shape, p = cache
            nb, h, wd, c = x_shape
            d = np.repeat(np.repeat(d, p, axis=1), p, axis=2) / (p * p)
        elif kind == "flatten":
            d = d.reshape(cache)
        elif kind == "dense":
            x, w = cache
            if want_weight_grads:
                gw, gb = grad_views[layer_idx]
                gw += x.T @ d
                gb += d.sum(axis=0)
            d = d @ w.T
        layer_idx -= 1
    return d, grads


# --------------------------------------------------------------------------
# Public operations


def forward(model: GuideModel, images: np.ndarray) -> np.ndarray:
    """Pre-softmax logits for a batch of images in [0,1], shape (N, H, W, C)."""
    x = _check_batch(model, images)
    logits, _ = _run_forward(model, x)
    return logits


def forward_features(model: GuideModel, images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(penultimate activations, logits) for a batch; the penultimate layer is
    the input to the final dense head."""
    x = _check_batch(model, images)
    logits, penultimate = _run_forward(model, x)
    if penultimate is None:
        raise ValueError("model has no dense head; no penultimate activations")
    return penultimate, logits


def input_gradient(model: GuideModel, image: np.ndarray, objective: Objective) -> np.ndarray:
    """d(objective)/d(pixel) at `image` (shape (H, W, C)), same shape out."""
    if image.ndim != 3:
        raise ShapeError(f"expected a single image of shape (H, W, C), got {image.shape}")
    return input_gradient_batch(model, image[None], objective)[0]


def input_gradient_batch(model: GuideModel, images: np.ndarray, objective: Objective) -> np.ndarray:
    x = _check_batch(model, images)
    caches: list = []
    logits, _ = _run_forward(model, x, caches)
    dlogits = _objective_dlogits(objective, logits)
    dinput, _ = _run_backward(model, caches, dlogits, want_weight_grads=False)
    if not np.all(np.isfinite(dinput)):
        raise NonFiniteError("input gradient is non-finite")
    return dinput


def _logsumexp(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=1, keepdims=True)
    return m + np.log(np.exp(logits - m).sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    e = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy_loss(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean cross-entropy. Returns (loss, dlogits, correct flags)."""
    n = logits.shape[0]
    logp = logits - _logsumexp(logits)
    loss = float(-logp[np.arange(n), labels].mean())
    d = np.exp(logp)
    d[np.arange(n), labels] -= 1.0
    d /= n
    correct = logits.argmax(axis=1) == labels
    return loss, d.astype(logits.dtype), correct


def loss_and_weight_grads(model: GuideModel, images: np.ndarray, labels: np.ndarray):
    """(loss, correct flags, flat weight gradient) on one batch."""
    x = _check_batch(model, images)
    caches: list = []
    logits, _ = _run_forward(model, x, caches)
    loss, dlogits, correct = cross_entropy_loss(logits, np.asarray(labels))
    _, grads = _run_backward(model, caches, dlogits, want_weight_grads=True)
    return loss, correct, grads


def _decay_mask(model: GuideModel) -> np.ndarray:
    """1.0 for weight matrices/kernels, 0.0 for biases (biases are not decayed)."""
    mask = np.zeros_like(model.weights)
    offset = 0
    for _, shapes in model.spec.parameter_slots():
        for i, shape in enumerate(shapes):
            n = int(np.prod(shape))
            if i == 0:  # first slot per layer is the weight tensor
                mask[offset:offset + n] = 1.0
            offset += n
    return mask


def sgd_epoch(model: GuideModel, batches: Iterable[tuple[np.ndarray, np.ndarray]],
              lr: float, weight_decay: float = 0.0) -> np.ndarray:
    """One epoch of minibatch SGD on cross-entropy, mutating model weights.

    Returns, concatenated over the batches in order, whether the pre-update
    model predicted each image correctly. Aborts on non-finite loss.
    """
    if lr < 0:
        raise ValueError("lr must be >= 0")
    decay_mask = _decay_mask(model) if weight_decay else None
    flags = []
    for batch_idx, (images, labels) in enumerate(batches):
        loss, correct, grads = loss_and_weight_grads(model, images, labels)
        if not np.isfinite(loss):
            raise NonFiniteError(f"non-finite training loss on batch {batch_idx}")
        if weight_decay:
            grads = grads + weight_decay * decay_mask * model.weights
        model.weights -= model.dtype.type(lr) * grads
        if not np.all(np.isfinite(model.weights)):
            raise NonFiniteError(f"non-finite weights after batch {batch_idx}")
        flags.append(correct)
    return np.concatenate(flags) if flags else np.zeros(0, dtype=bool)


# --------------------------------------------------------------------------
# Checkpoint container

_MAGIC = b"GMC1"
_VERSION = 1


def save_checkpoint(model: GuideModel, path) -> None:
    """Versioned little-endian binary: magic, version byte, JSON header
    (spec, normalization, dtype), then the raw weight payload."""
    header = {
        "spec": model.spec.to_dict(),
        "mean": [float(v) for v in model.mean],
        "std": [float(v) for v in model.std],
        "dtype": "f8" if model.dtype == np.float64 else "f4",
        "param_count": int(model.weights.size),
    }
    blob = json.dumps(header, sort_keys=True).encode()
    payload = model.weights.astype("<" + header["dtype"]).tobytes()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<B", _VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(payload)


def load_checkpoint(path) -> GuideModel:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _MAGIC:
            raise ValueError(f"not a model checkpoint (bad magic {magic!r})")
        (version,) = struct.unpack("<B", fh.read(1))
        if version != _VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        (blob_len,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(blob_len).decode())
        spec = NetworkSpec.from_dict(header["spec"])
        dtype = np.float64 if header["dtype"] == "f8" else np.float32
        weights = np.frombuffer(fh.read(), dtype="<" + header["dtype"]).astype(dtype)
    if weights.size != header["param_count"]:
        raise ValueError(
            f"truncated checkpoint: {weights.size} of {header['param_count']} weights"
        )
    return GuideModel(spec, weights,
                      np.asarray(header["mean"], dtype=dtype),
                      np.asarray(header["std"], dtype=dtype))
