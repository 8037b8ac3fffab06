"""Network specs, parameter initialization, masks and checkpoint files."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

from .autodiff import (
    Conv2d,
    Dense,
    Flatten,
    MaxPool2d,
    ParameterSet,
    ReLU,
    ShapeError,
    as_tensor,
    forward_graph,
    layer_name,
    output_gradient_at,
)

__all__ = [
    "NetworkSpec", "ParameterSet", "Mask", "mlp", "small_cnn", "build_network",
    "init_params", "apply_mask", "bottleneck_activations",
    "save_params", "load_params", "save_mask", "load_mask", "Classifier",
]


@dataclass(frozen=True)
class NetworkSpec:
    """A sequential network.

    ``bottleneck`` is the index of the layer whose output is the activation
    space used for concept analysis.
    """

    name: str
    input_shape: tuple[int, ...]
    layers: tuple
    classes: int
    bottleneck: int

    def __post_init__(self):
        if not 0 <= self.bottleneck < len(self.layers):
            raise ValueError(f"bottleneck {self.bottleneck} is not a layer index")
        shape = tuple(self.input_shape)
        for i, layer in enumerate(self.layers):
            try:
                shape = layer.output_shape(shape)
            except ValueError as exc:
                raise ShapeError(layer_name(i, layer), str(exc)) from None
        if shape != (self.classes,):
            raise ShapeError("output", f"network ends in {shape}, expected ({self.classes},)")

    @cached_property
    def _shapes(self) -> list[tuple[int, ...]]:
        shapes = [tuple(self.input_shape)]
        for layer in self.layers:
            shapes.append(layer.output_shape(shapes[-1]))
        return shapes

    def layer_input_shape(self, index: int) -> tuple[int, ...]:
        return self._shapes[index]

    def layer_output_shape(self, index: int) -> tuple[int, ...]:
        return self._shapes[index + 1]

    def param_slots(self) -> list[int | None]:
        """Map layer index to its position in ParameterSet, or None."""
        slots, p = [], 0
        for layer in self.layers:
            if layer.has_params:
                slots.append(p)
                p += 1
            else:
                slots.append(None)
        return slots

    def prunable_layers(self) -> list[int]:
        return [i for i, layer in enumerate(self.layers) if layer.has_params]

    def describe(self) -> list[dict]:
        rows = []
        for i, layer in enumerate(self.layers):
            rows.append({"index": i, "kind": layer.kind, **{k: v for k, v in vars(layer).items()}})
        return rows


def mlp(input_shape=(28, 28, 1), hidden=(300, 100), classes=10) -> NetworkSpec:
    """784-300-100-C style perceptron; the bottleneck is the last hidden dense layer."""
    n_in = int(np.prod(input_shape))
    layers: list = [Flatten()]
    width = n_in
    for h in hidden:
        layers += [Dense(width, h), ReLU()]
        width = h
    layers.append(Dense(width, classes))
    return NetworkSpec("mlp", tuple(input_shape), tuple(layers), classes, bottleneck=len(layers) - 3)


def small_cnn(input_shape=(32, 32, 3), channels=(16, 32), hidden=64, classes=10) -> NetworkSpec:
    """conv3x3 -> pool -> conv3x3 -> pool -> dense -> dense.

    The bottleneck is the penultimate dense layer's (pre-activation) output.
    """
    h, w, c = input_shape
    layers: list = []
    for ch in channels:
        layers += [Conv2d(c, ch), ReLU(), MaxPool2d(2)]
        c, h, w = ch, h // 2, w // 2
    layers += [Flatten(), Dense(h * w * c, hidden), ReLU(), Dense(hidden, classes)]
    return NetworkSpec("small_cnn", tuple(input_shape), tuple(layers), classes, bottleneck=len(layers) - 3)


def build_network(name: str, input_shape, classes: int, **kwargs) -> NetworkSpec:
    builders = {"mlp": mlp, "small_cnn": small_cnn}
    if name not in builders:
        raise ValueError(f"unknown model {name!r}; choose from {sorted(builders)}")
    return builders[name](input_shape=tuple(input_shape), classes=classes, **kwargs)


def init_params(spec: NetworkSpec, seed: int) -> ParameterSet:
    """He-normal weights (variance 2 / fan-in) and zero biases."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for i in spec.prunable_layers():
        layer = spec.layers[i]
        wshape, bshape = layer.param_shapes()
        weights.append(rng.normal(0.0, np.sqrt(2.0 / layer.fan_in()), size=wshape))
        biases.append(np.zeros(bshape))
    return ParameterSet(tuple(weights), tuple(biases))


@dataclass(frozen=True)
class Mask:
    """Binary keep-mask over every weight tensor (biases are never masked)."""

    tensors: tuple[np.ndarray, ...]
    threshold: float | None = None

    def __post_init__(self):
        for t in self.tensors:
            if not np.all((t == 0) | (t == 1)):
                raise ValueError("mask entries must be 0 or 1")

    @property
    def kept(self) -> int:
        return int(sum(t.sum() for t in self.tensors))

    @property
    def total(self) -> int:
        return sum(t.size for t in self.tensors)

    def flat(self) -> np.ndarray:
        return np.concatenate([t.ravel() for t in self.tensors])

    @classmethod
    def ones_like(cls, params: ParameterSet) -> "Mask":
        return cls(tuple(np.ones_like(w) for w in params.weights))

    @classmethod
    def from_flat(cls, flat: np.ndarray, like: ParameterSet) -> "Mask":
        flat = np.asarray(flat, dtype=np.float64)
        out, start = [], 0
        for w in like.weights:
            out.append(flat[start:start + w.size].reshape(w.shape))
            start += w.size
        if start != flat.size:
            raise ValueError(f"mask has {flat.size} entries, parameters have {start}")
        return cls(tuple(out))

    def array_equal(self, other: "Mask") -> bool:
        return len(self.tensors) == len(other.tensors) and all(
            a.shape == b.shape and np.array_equal(a, b) for a, b in zip(self.tensors, other.tensors))


def apply_mask(params: ParameterSet, mask: Mask) -> ParameterSet:
    if len(mask.tensors) != len(params.weights):
        raise ValueError(f"mask has {len(mask.tensors)} tensors, parameters have {len(params.weights)}")
    for m, w in zip(mask.tensors, params.weights):
        if m.shape != w.shape:
            raise ValueError(f"mask tensor {m.shape} does not match weight {w.shape}")
    return ParameterSet(tuple(w * m for w, m in zip(params.weights, mask.tensors)),
                        tuple(b.copy() for b in params.biases))


def bottleneck_activations(spec: NetworkSpec, params: ParameterSet, images) -> np.ndarray:
    """Outputs of the bottleneck layer, one flattened row per image."""
    images = as_tensor(images, "images")
    nodes = forward_graph(spec, params, images, stop=spec.bottleneck + 1)
    return nodes[-1].value.reshape(len(images), -1)


@dataclass(frozen=True)
class Classifier:
    """A network with fixed parameters that centers raw images by ``mean``."""

    spec: NetworkSpec
    params: ParameterSet
    mean: np.ndarray

    def inputs(self, images) -> np.ndarray:
        return as_tensor(images, "images") - np.asarray(self.mean, dtype=np.float64)

    def _batched(self, fn, images, batch_size):
        x = self.inputs(images)
        return np.concatenate([fn(x[i:i + batch_size]) for i in range(0, len(x), batch_size)])

    def logits(self, images, batch_size: int = 256) -> np.ndarray:
        return self._batched(lambda x: forward_graph(self.spec, self.params, x)[-1].value,
                             images, batch_size)

    def activations(self, images, batch_size: int = 256) -> np.ndarray:
        return self._batched(lambda x: bottleneck_activations(self.spec, self.params, x),
                             images, batch_size)

    def logit_gradient(self, images, cls: int, batch_size: int = 256) -> np.ndarray:
        """d logit_cls / d bottleneck activations, one flattened row per image."""
        layer = self.spec.bottleneck

        def fn(x):
            acts = forward_graph(self.spec, self.params, x, stop=layer + 1)[-1].value
            return output_gradient_at(self.spec, self.params, acts, layer, cls).reshape(len(x), -1)

        return self._batched(fn, images, batch_size)

    def accuracy(self, images, labels) -> float:
        return float(np.mean(self.logits(images).argmax(axis=1) == np.asarray(labels)))


# ---------------------------------------------------------------------------
# Checkpoint container
# ---------------------------------------------------------------------------
#
# magic "PLAB" | u32 version | u32 kind (0 params, 1 mask) | u32 tensor count
# per tensor: u16 name length | utf-8 name | u8 ndim | u32 dims...
# payload: each tensor's entries as little-endian f64, in table order

MAGIC = b"PLAB"
VERSION = 1
_KIND_PARAMS, _KIND_MASK = 0, 1


def _write_container(path, kind: int, named: list[tuple[str, np.ndarray]]) -> None:
    header = bytearray(MAGIC)
    header += struct.pack("<III", VERSION, kind, len(named))
    for name, arr in named:
        raw = name.encode()
        header += struct.pack("<H", len(raw)) + raw
        header += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    with open(path, "wb") as fh:
        fh.write(bytes(header))
        for _, arr in named:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_container(path, kind: int) -> list[tuple[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: bad magic {data[:4]!r}")
    version, file_kind, count = struct.unpack_from("<III", data, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    if file_kind != kind:
        raise ValueError(f"{path}: container kind {file_kind}, expected {kind}")
    pos = 16
    table = []
    for _ in range(count):
        (n,) = struct.unpack_from("<H", data, pos)
        name = data[pos + 2:pos + 2 + n].decode()
        pos += 2 + n
        (ndim,) = struct.unpack_from("<B", data, pos)
        shape = struct.unpack_from(f"<{ndim}I", data, pos + 1)
        pos += 1 + 4 * ndim
        table.append((name, shape))
    out = []
    for name, shape in table:
        size = int(np.prod(shape)) * 8
        if pos + size > len(data):
            raise ValueError(f"{path}: truncated payload for {name} at byte {pos}")
        out.append((name, np.frombuffer(data, dtype="<f8", count=size // 8, offset=pos)
                    .reshape(shape).astype(np.float64)))
        pos += size
    if pos != len(data):
        raise ValueError(f"{path}: {len(data) - pos} trailing bytes")
    return out


def save_params(path, params: ParameterSet) -> None:
    named = [(f"w{i}", w) for i, w in enumerate(params.weights)]
    named += [(f"b{i}", b) for i, b in enumerate(params.biases)]
    _write_container(path, _KIND_PARAMS, named)


def load_params(path) -> ParameterSet:
    named = dict(_read_container(path, _KIND_PARAMS))
    k = sum(1 for n in named if n.startswith("w"))
    return ParameterSet(tuple(named[f"w{i}"] for i in range(k)), tuple(named[f"b{i}"] for i in range(k)))


def save_mask(path, mask: Mask) -> None:
    _write_container(path, _KIND_MASK, [(f"m{i}", t) for i, t in enumerate(mask.tensors)])


def load_mask(path) -> Mask:
    return Mask(tuple(arr for _, arr in _read_container(path, _KIND_MASK)))
