"""Differentiable feature-extractor contract and the built-in toy CNN.

Everything runs in float64 on plain numpy arrays. Layers expose a
forward pass returning a cache plus a backward pass mapping the gradient
at their output to the gradient at their input; model weights are fixed
after construction, so no weight gradients are ever computed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable, Protocol, Sequence

import numpy as np

from .errors import LayerNotFoundError, ValidationError

FVM_MAGIC = "featvis-model-v1"


@dataclass(frozen=True)
class LayerRef:
    """A resolved layer: dot-path name plus its position in forward order."""

    name: str
    depth_index: int


class FeatureModel(Protocol):
    """Adapter contract for wrapping an external feature extractor.

    Implementations beyond the built-in :class:`ToyCNN` are out of scope,
    but anything providing this surface plugs into the facet builder and
    the optimization pipeline unchanged.
    """

    input_channels: int

    def layer_names(self) -> list[str]: ...

    def resolve_layer(self, name: str) -> LayerRef: ...

    def forward_to(self, image: np.ndarray, layer: LayerRef) -> np.ndarray: ...

    def forward_pair(self, image: np.ndarray, layer: LayerRef) -> tuple[np.ndarray, np.ndarray]: ...

    def loss_gradient(self, image, layer, loss_fn) -> tuple[float, np.ndarray]: ...


def _require_finite(arr: np.ndarray, what: str):
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{what} contains non-finite entries")


class _Conv3x3:
    """3x3 convolution, stride 1, zero padding 1. Preserves spatial size."""

    kind = "conv3x3"

    def __init__(self, weight: np.ndarray, bias: np.ndarray):
        self.weight = weight  # (C_out, C_in, 3, 3)
        self.bias = bias      # (C_out,)

    def out_channels(self, c_in):
        return self.weight.shape[0]

    def out_shape(self, c, h, w):
        return (self.weight.shape[0], h, w)

    def forward(self, x):
        c_out, c_in, _, _ = self.weight.shape
        _, h, w = x.shape
        xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
        out = np.tile(self.bias[:, None, None], (1, h, w))
        for di in range(3):
            for dj in range(3):
                out += np.tensordot(
                    self.weight[:, :, di, dj], xp[:, di:di + h, dj:dj + w], axes=(1, 0)
                )
        return out, x.shape

    def backward(self, dout, cache):
        c, h, w = cache
        dxp = np.zeros((c, h + 2, w + 2))
        for di in range(3):
            for dj in range(3):
                dxp[:, di:di + h, dj:dj + w] += np.tensordot(
                    self.weight[:, :, di, dj], dout, axes=(0, 0)
                )
        return dxp[:, 1:-1, 1:-1]


class _ReLU:
    kind = "relu"

    def out_shape(self, c, h, w):
        return (c, h, w)

    def forward(self, x):
        return np.maximum(x, 0.0), x

    def backward(self, dout, cache):
        # subgradient at 0 fixed to 0
        return dout * (cache > 0.0)


class _MaxPool2x2:
    """Non-overlapping 2x2 max pooling; trailing odd row/column is dropped.

    Gradient routes to the first maximal element of each window in
    row-major order, which is what argmax over the flattened window gives.
    """

    kind = "maxpool2x2"

    def out_shape(self, c, h, w):
        return (c, h // 2, w // 2)

    def forward(self, x):
        c, h, w = x.shape
        h2, w2 = h // 2, w // 2
        win = x[:, :2 * h2, :2 * w2].reshape(c, h2, 2, w2, 2)
        win = win.transpose(0, 1, 3, 2, 4).reshape(c, h2, w2, 4)
        idx = np.argmax(win, axis=-1)
        out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
        return out, (x.shape, idx)

    def backward(self, dout, cache):
        (c, h, w), idx = cache
        h2, w2 = h // 2, w // 2
        dx = np.zeros((c, h, w))
        ci, ii, jj = np.meshgrid(
            np.arange(c), np.arange(h2), np.arange(w2), indexing="ij"
        )
        dx[ci, 2 * ii + idx // 2, 2 * jj + idx % 2] = dout
        return dx


class ToyCNN:
    """Seeded, fixed-weight CNN so the whole pipeline runs self-contained.

    Architecture: conv3x3(3->8) / ReLU / conv3x3(8->16) / ReLU /
    maxpool2x2 / conv3x3(16->32) / ReLU. Weights are drawn uniformly from
    [-s, s] with s = 1/sqrt(fan_in) and rounded through float32 so the
    on-disk format round-trips exactly; conv biases start at zero, which
    keeps activations proportional to image content.
    """

    CHANNELS = (3, 8, 16, 32)
    MIN_INPUT = 4
    input_channels = 3

    def __init__(self, seed: int = 0):
        self.seed = int(seed)
        rng = np.random.default_rng(self.seed)
        self._layers: list[tuple[str, object]] = []
        conv_plan = [("conv1", 3, 8), ("conv2", 8, 16), ("conv3", 16, 32)]
        for i, (name, c_in, c_out) in enumerate(conv_plan, start=1):
            fan_in = c_in * 9
            s = 1.0 / np.sqrt(fan_in)
            w = rng.uniform(-s, s, size=(c_out, c_in, 3, 3))
            w = w.astype(np.float32).astype(np.float64)
            self._layers.append((name, _Conv3x3(w, np.zeros(c_out))))
            self._layers.append((f"relu{i}", _ReLU()))
            if name == "conv2":
                self._layers.append(("pool1", _MaxPool2x2()))
        self._index = {name: i for i, (name, _) in enumerate(self._layers)}
        self.forward_calls = 0

    # -- layer resolution ---------------------------------------------------

    def layer_names(self):
        return [name for name, _ in self._layers]

    def resolve_layer(self, name: str) -> LayerRef:
        if name not in self._index:
            known = ", ".join(self.layer_names())
            raise LayerNotFoundError(f"unknown layer '{name}' (known layers: {known})")
        return LayerRef(name=name, depth_index=self._index[name])

    def activation_shape(self, layer: LayerRef, input_hw: tuple[int, int]):
        """Analytic output shape of `layer` for a (3, H, W) input."""
        shape = (self.input_channels, *input_hw)
        for _, lyr in self._layers[: layer.depth_index + 1]:
            shape = lyr.out_shape(*shape)
        return shape

    # -- forward / backward -------------------------------------------------

    def _validate_input(self, image: np.ndarray):
        image = np.asarray(image, dtype=np.float64)
        if image.ndim != 3 or image.shape[0] != self.input_channels:
            raise ValidationError(
                f"expected (3, H, W) image, got shape {image.shape}"
            )
        if min(image.shape[1:]) < self.MIN_INPUT:
            raise ValidationError(
                f"input spatial size must be >= {self.MIN_INPUT}, got {image.shape[1:]}"
            )
        _require_finite(image, "input image")
        return image

    def _forward(self, image: np.ndarray, upto: int):
        """Single counted forward pass through layers [0, upto]."""
        self.forward_calls += 1
        acts, caches = [], []
        x = image
        for _, lyr in self._layers[: upto + 1]:
            x, cache = lyr.forward(x)
            acts.append(x)
            caches.append(cache)
        return acts, caches

    def forward_to(self, image: np.ndarray, layer: LayerRef) -> np.ndarray:
        image = self._validate_input(image)
        acts, _ = self._forward(image, layer.depth_index)
        return acts[-1]

    def forward_pair(self, image: np.ndarray, layer: LayerRef):
        """Activations (previous layer, requested layer) from one pass."""
        if layer.depth_index < 1:
            raise ValidationError(
                f"layer '{layer.name}' is the first layer; no previous activation exists"
            )
        image = self._validate_input(image)
        acts, _ = self._forward(image, layer.depth_index)
        return acts[-2], acts[-1]

    def loss_gradient(self, image: np.ndarray, layer: LayerRef,
                      loss_fn: Callable[[np.ndarray, np.ndarray], tuple]):
        """Gradient of a scalar loss of (prev, curr) activations w.r.t. the image.

        `loss_fn(prev, curr)` must return `(value, d_prev, d_curr)` with the
        two gradients shaped like their activations. Runs exactly one
        forward pass; the backward pass is the hand-written reverse sweep.
        """
        if layer.depth_index < 1:
            raise ValidationError(
                f"layer '{layer.name}' is the first layer; no previous activation exists"
            )
        image = self._validate_input(image)
        idx = layer.depth_index
        acts, caches = self._forward(image, idx)
        value, d_prev, d_curr = loss_fn(acts[-2], acts[-1])
        if not np.isfinite(value):
            raise ValidationError("loss_fn returned a non-finite value")
        g = np.asarray(d_curr, dtype=np.float64)
        for k in range(idx, -1, -1):
            g = self._layers[k][1].backward(g, caches[k])
            if k == idx:  # inject the previous-layer term at its node
                g = g + d_prev
        return value, g

    # -- serialization ------------------------------------------------------

    def _conv_layers(self):
        return [(name, lyr) for name, lyr in self._layers if isinstance(lyr, _Conv3x3)]

    def save(self, path):
        """Write weights: one-line JSON header, then little-endian float32."""
        header = {
            "magic": FVM_MAGIC,
            "seed": self.seed,
            "layers": [
                {"name": name, "kind": lyr.kind}
                if not isinstance(lyr, _Conv3x3)
                else {
                    "name": name,
                    "kind": lyr.kind,
                    "weight_shape": list(lyr.weight.shape),
                    "bias_shape": list(lyr.bias.shape),
                }
                for name, lyr in self._layers
            ],
        }
        payload = b"".join(
            arr.astype("<f4").tobytes()
            for _, lyr in self._conv_layers()
            for arr in (lyr.weight, lyr.bias)
        )
        with open(path, "wb") as fh:
            fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
            fh.write(b"\n")
            fh.write(payload)

    @classmethod
    def load(cls, path) -> "ToyCNN":
        with open(path, "rb") as fh:
            raw = fh.read()
        nl = raw.index(b"\n")
        header = json.loads(raw[:nl].decode("utf-8"))
        if header.get("magic") != FVM_MAGIC:
            raise ValidationError(f"{path}: not a featvis model file")
        model = cls(seed=header["seed"])
        offset = nl + 1
        for spec, (name, lyr) in zip(
            (l for l in header["layers"] if l["kind"] == "conv3x3"),
            model._conv_layers(),
        ):
            if spec["name"] != name or tuple(spec["weight_shape"]) != lyr.weight.shape:
                raise ValidationError(f"{path}: layer table does not match architecture")
            for attr, shape_key in (("weight", "weight_shape"), ("bias", "bias_shape")):
                shape = tuple(spec[shape_key])
                count = int(np.prod(shape))
                arr = np.frombuffer(raw, dtype="<f4", count=count, offset=offset)
                offset += 4 * count
                setattr(lyr, attr, arr.reshape(shape).astype(np.float64))
        return model


def finite_difference_gradient(loss_value: Callable[[np.ndarray], float],
                               image: np.ndarray, step: float = 1e-3) -> np.ndarray:
    """Central-difference gradient oracle, elementwise over the image."""
    image = np.asarray(image, dtype=np.float64)
    grad = np.zeros_like(image)
    it = np.nditer(image, flags=["multi_index"])
    while not it.finished:
        ix = it.multi_index
        bumped = image.copy()
        bumped[ix] = image[ix] + step
        up = loss_value(bumped)
        bumped[ix] = image[ix] - step
        down = loss_value(bumped)
        grad[ix] = (up - down) / (2.0 * step)
        it.iternext()
    return grad
