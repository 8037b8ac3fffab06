"""Small reverse-mode engine for sequential MLPs and CNNs.

Tensors are float64 numpy arrays. Images use NHWC layout. A network is a
sequence of layers; a forward pass records one :class:`ComputeNode` per layer
plus a fused softmax cross-entropy sink, and backprop walks that chain in
reverse. Hessian-vector products are central differences of gradients.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Input or parameter shapes do not compose at a given layer."""

    def __init__(self, layer: str, message: str):
        super().__init__(f"{layer}: {message}")
        self.layer = layer


class NonFiniteError(ValueError):
    """A NaN or Inf was seen in an input or an intermediate value."""

    def __init__(self, where: str, message: str = "non-finite value"):
        super().__init__(f"{where}: {message}")
        self.where = where


def as_tensor(data: Any, name: str = "input") -> np.ndarray:
    """Convert external data to a float64 array, rejecting NaN/Inf."""
    arr = np.asarray(data, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(name)
    return arr


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Dense:
    in_features: int
    out_features: int

    kind = "matmul"
    has_params = True

    def param_shapes(self) -> tuple[tuple[int, ...], tuple[int, ...]]:
        return (self.in_features, self.out_features), (self.out_features,)

    def fan_in(self) -> int:
        return self.in_features

    def output_shape(self, shape: tuple[int, ...]) -> tuple[int, ...]:
        if shape != (self.in_features,):
            raise ValueError(f"expected ({self.in_features},), got {shape}")
        return (self.out_features,)

    def forward(self, x, w, b):
        return x @ w + b, x

    def backward(self, dy, cache, w, need_dx=True):
        x = cache
        return (dy @ w.T if need_dx else None), x.T @ dy, dy.sum(axis=0)


@dataclass(frozen=True)
class Conv2d:
    """'Same'-style 2D convolution over NHWC input, weights (kh, kw, cin, cout)."""

    in_channels: int
    out_channels: int
    kernel: int = 3
    stride: int = 1
    padding: int = 1

    kind = "conv2d"
    has_params = True

    def param_shapes(self):
        k = self.kernel
        return (k, k, self.in_channels, self.out_channels), (self.out_channels,)

    def fan_in(self) -> int:
        return self.kernel * self.kernel * self.in_channels

    def _out_hw(self, h: int, w: int) -> tuple[int, int]:
        oh = (h + 2 * self.padding - self.kernel) // self.stride + 1
        ow = (w + 2 * self.padding - self.kernel) // self.stride + 1
        return oh, ow

    def output_shape(self, shape):
        if len(shape) != 3 or shape[2] != self.in_channels:
            raise ValueError(f"expected (H, W, {self.in_channels}), got {shape}")
        oh, ow = self._out_hw(shape[0], shape[1])
        if oh < 1 or ow < 1:
            raise ValueError(f"input {shape} too small for kernel {self.kernel}")
        return (oh, ow, self.out_channels)

    def _columns(self, x):
        p, k, s = self.padding, self.kernel, self.stride
        xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0))) if p else x
        n, h, w, c = x.shape
        oh, ow = self._out_hw(h, w)
        cols = np.empty((n, oh, ow, k, k, c))
        for i in range(k):
            for j in range(k):
                cols[:, :, :, i, j, :] = xp[:, i:i + s * oh:s, j:j + s * ow:s, :]
        return cols.reshape(n, oh, ow, k * k * c), xp.shape

    def forward(self, x, w, b):
        cols, padded_shape = self._columns(x)
        y = cols @ w.reshape(-1, self.out_channels) + b
        return y, (cols, padded_shape)

    def backward(self, dy, cache, w, need_dx=True):
        cols, padded_shape = cache
        k, s, p = self.kernel, self.stride, self.padding
        n, oh, ow, cout = dy.shape
        c = self.in_channels
        dy2 = dy.reshape(-1, cout)
        dw = (cols.reshape(-1, cols.shape[-1]).T @ dy2).reshape(w.shape)
        db = dy2.sum(axis=0)
        if not need_dx:
            return None, dw, db
        dcols = (dy2 @ w.reshape(-1, cout).T).reshape(n, oh, ow, k, k, c)
        dxp = np.zeros(padded_shape)
        for i in range(k):
            for j in range(k):
                dxp[:, i:i + s * oh:s, j:j + s * ow:s, :] += dcols[:, :, :, i, j, :]
        if p:
            dxp = dxp[:, p:-p, p:-p, :]
        return dxp, dw, db


@dataclass(frozen=True)
class ReLU:
    kind = "relu"
    has_params = False

    def output_shape(self, shape):
        return shape

    def forward(self, x, w=None, b=None):
        mask = x > 0
        return x * mask, mask

    def backward(self, dy, cache, w=None, need_dx=True):
        return dy * cache, None, None


@dataclass(frozen=True)
class MaxPool2d:
    size: int = 2

    kind = "maxpool"
    has_params = False

    def output_shape(self, shape):
        if len(shape) != 3 or shape[0] % self.size or shape[1] % self.size:
            raise ValueError(f"spatial dims of {shape} not divisible by {self.size}")
        return (shape[0] // self.size, shape[1] // self.size, shape[2])

    def forward(self, x, w=None, b=None):
        n, h, wd, c = x.shape
        s = self.size
        blocks = x.reshape(n, h // s, s, wd // s, s, c).transpose(0, 1, 3, 5, 2, 4)
        blocks = blocks.reshape(n, h // s, wd // s, c, s * s)
        # first maximum wins on ties so the gradient is routed to one input
        arg = blocks.argmax(axis=-1)
        y = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
        return y, (arg, x.shape)

    def backward(self, dy, cache, w=None, need_dx=True):
        arg, shape = cache
        n, h, wd, c = shape
        s = self.size
        dblocks = np.zeros(dy.shape + (s * s,))
        np.put_along_axis(dblocks, arg[..., None], dy[..., None], axis=-1)
        dblocks = dblocks.reshape(n, h // s, wd // s, c, s, s).transpose(0, 1, 4, 2, 5, 3)
        return dblocks.reshape(shape), None, None


@dataclass(frozen=True)
class Flatten:
    kind = "flatten"
    has_params = False

    def output_shape(self, shape):
        return (int(np.prod(shape)),)

    def forward(self, x, w=None, b=None):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, dy, cache, w=None, need_dx=True):
        return dy.reshape(cache), None, None


Layer = Dense | Conv2d | ReLU | MaxPool2d | Flatten


def layer_name(index: int, layer) -> str:
    return f"layer {index} ({type(layer).__name__})"


# ---------------------------------------------------------------------------
# Parameters and batches
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ParameterSet:
    """Weights and biases of the parametric layers, in layer order.

    Also used to carry gradients and Hessian-vector products, which share the
    same layout. The flat weight view concatenates raveled weights only;
    biases are never part of it.
    """

    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]

    def __post_init__(self):
        if len(self.weights) != len(self.biases):
            raise ValueError("weights and biases must pair up")

    @property
    def n_weights(self) -> int:
        return sum(w.size for w in self.weights)

    def flat_weights(self) -> np.ndarray:
        return np.concatenate([w.ravel() for w in self.weights])

    def with_flat_weights(self, flat: np.ndarray) -> "ParameterSet":
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.n_weights:
            raise ValueError(f"flat view has {self.n_weights} entries, got {flat.size}")
        out, start = [], 0
        for w in self.weights:
            out.append(flat[start:start + w.size].reshape(w.shape).copy())
            start += w.size
        return ParameterSet(tuple(out), self.biases)

    def vector(self) -> np.ndarray:
        """All entries, weights first then biases."""
        return np.concatenate([a.ravel() for a in (*self.weights, *self.biases)])

    def from_vector(self, vec: np.ndarray) -> "ParameterSet":
        arrays, start = [], 0
        for a in (*self.weights, *self.biases):
            arrays.append(np.asarray(vec[start:start + a.size], dtype=np.float64).reshape(a.shape))
            start += a.size
        if start != len(vec):
            raise ValueError(f"vector length {len(vec)} does not match {start} parameters")
        k = len(self.weights)
        return ParameterSet(tuple(arrays[:k]), tuple(arrays[k:]))

    def map(self, fn: Callable[[np.ndarray], np.ndarray]) -> "ParameterSet":
        return ParameterSet(tuple(fn(w) for w in self.weights), tuple(fn(b) for b in self.biases))

    def zeros_like(self) -> "ParameterSet":
        return self.map(np.zeros_like)

    def copy(self) -> "ParameterSet":
        return self.map(np.array)

    def allclose(self, other: "ParameterSet", **kw) -> bool:
        return np.allclose(self.vector(), other.vector(), **kw)

    def array_equal(self, other: "ParameterSet") -> bool:
        return all(a.shape == b.shape and np.array_equal(a, b)
                   for a, b in zip((*self.weights, *self.biases), (*other.weights, *other.biases)))


GradientSet = ParameterSet


@dataclass(frozen=True)
class LabeledBatch:
    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "images", as_tensor(self.images, "batch images"))
        object.__setattr__(self, "labels", np.asarray(self.labels, dtype=np.int64))
        if len(self.images) == 0:
            raise ValueError("batch is empty")
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self) -> int:
        return len(self.labels)


# ---------------------------------------------------------------------------
# Graph evaluation
# ---------------------------------------------------------------------------


@dataclass
class ComputeNode:
    op: str
    inputs: tuple[int, ...]
    value: np.ndarray
    cache: Any = field(default=None, repr=False)
    param_index: int | None = None


def _check_params(network, params: ParameterSet) -> None:
    slots = [i for i, layer in enumerate(network.layers) if layer.has_params]
    if len(slots) != len(params.weights):
        raise ShapeError("network", f"{len(slots)} parametric layers but {len(params.weights)} weight tensors")
    for p, i in enumerate(slots):
        layer = network.layers[i]
        wshape, bshape = layer.param_shapes()
        if params.weights[p].shape != wshape or params.biases[p].shape != bshape:
            raise ShapeError(layer_name(i, layer),
                             f"expected weight {wshape} / bias {bshape}, got "
                             f"{params.weights[p].shape} / {params.biases[p].shape}")


def forward_graph(network, params: ParameterSet, images: np.ndarray,
                  start: int = 0, stop: int | None = None) -> list[ComputeNode]:
    """Run layers ``start..stop-1`` and return the node chain.

    Node 0 holds the input; node ``i + 1 - start`` holds the output of layer ``i``.
    """
    _check_params(network, params)
    x = as_tensor(images, "input")
    layers = network.layers
    stop = len(layers) if stop is None else stop
    shape = tuple(network.layer_input_shape(start))
    if x.ndim == 0 or tuple(x.shape[1:]) != shape:
        raise ShapeError(layer_name(start, layers[start]) if start < len(layers) else "input",
                         f"expected input of shape (batch, {', '.join(map(str, shape))}), got {x.shape}")
    slots = network.param_slots()
    nodes = [ComputeNode("input", (), x)]
    for i in range(start, stop):
        layer = layers[i]
        p = slots[i]
        w = params.weights[p] if p is not None else None
        b = params.biases[p] if p is not None else None
        y, cache = layer.forward(x, w, b)
        if not np.all(np.isfinite(y)):
            raise NonFiniteError(layer_name(i, layer))
        nodes.append(ComputeNode(layer.kind, (len(nodes) - 1,), y, cache, p))
        x = y
    return nodes


def softmax_xent(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its gradient with respect to the logits."""
    n, c = logits.shape
    if labels.min() < 0 or labels.max() >= c:
        raise ShapeError("softmax-xent", f"labels must lie in [0, {c})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1))
    logp = shifted - logsumexp[:, None]
    loss = -logp[np.arange(n), labels].mean()
    dlogits = np.exp(logp)
    dlogits[np.arange(n), labels] -= 1.0
    return float(loss), dlogits / n


def _backward(network, params: ParameterSet, nodes: list[ComputeNode], upstream: np.ndarray,
              start: int = 0, want_params: bool = True, want_input: bool = True):
    grads_w = [None] * len(params.weights)
    grads_b = [None] * len(params.biases)
    dy = upstream
    for offset in range(len(nodes) - 1, 0, -1):
        node = nodes[offset]
        idx = start + offset - 1
        layer = network.layers[idx]
        w = params.weights[node.param_index] if node.param_index is not None else None
        # the input gradient of the first layer is only computed on request
        dy, dw, db = layer.backward(dy, node.cache, w, need_dx=want_input or offset > 1)
        if dy is not None and not np.all(np.isfinite(dy)):
            raise NonFiniteError(layer_name(idx, layer), "non-finite gradient")
        if node.param_index is not None and want_params:
            grads_w[node.param_index] = dw
            grads_b[node.param_index] = db
    return dy, grads_w, grads_b


def evaluate(network, params: ParameterSet, batch: LabeledBatch,
             temperature: float = 1.0) -> tuple[float, np.ndarray]:
    """Mean cross-entropy loss and logits ``(batch, classes)``."""
    nodes = forward_graph(network, params, batch.images)
    logits = nodes[-1].value
    loss, _ = softmax_xent(logits / temperature, batch.labels)
    return loss, logits


def loss_and_gradients(network, params: ParameterSet, batch: LabeledBatch,
                       temperature: float = 1.0) -> tuple[float, GradientSet]:
    nodes = forward_graph(network, params, batch.images)
    loss, dlogits = softmax_xent(nodes[-1].value / temperature, batch.labels)
    _, gw, gb = _backward(network, params, nodes, dlogits / temperature, want_input=False)
    return loss, ParameterSet(tuple(gw), tuple(gb))


def gradients(network, params: ParameterSet, batch: LabeledBatch,
              temperature: float = 1.0) -> GradientSet:
    """Gradient of the mean batch loss, laid out like ``params``."""
    return loss_and_gradients(network, params, batch, temperature)[1]


def output_gradient_at(network, params: ParameterSet, activations: np.ndarray, layer: int,
                       cls: int) -> np.ndarray:
    """Gradient of logit ``cls`` with respect to the output of ``layer``.

    ``activations`` are that layer's outputs, batch first and in the layer's
    native shape.
    """
    start = layer + 1
    if start >= len(network.layers):
        return np.broadcast_to(np.eye(network.classes)[cls], activations.shape).copy()
    nodes = forward_graph(network, params, activations, start=start)
    upstream = np.zeros_like(nodes[-1].value)
    upstream[:, cls] = 1.0
    dx, _, _ = _backward(network, params, nodes, upstream, start=start, want_params=False)
    return dx


# ---------------------------------------------------------------------------
# Hessian-vector products
# ---------------------------------------------------------------------------


def default_hvp_eps(theta: np.ndarray) -> float:
    return 1e-4 * (1.0 + float(np.max(np.abs(theta), initial=0.0)))


def finite_difference_hvp(grad_fn: Callable[[np.ndarray], np.ndarray], theta: np.ndarray,
                          v: np.ndarray, eps: float | None = None) -> np.ndarray:
    """H v by central differences of ``grad_fn`` along the unit direction of v."""
    theta = np.asarray(theta, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    norm = float(np.linalg.norm(v))
    if norm == 0.0:
        return np.zeros_like(theta)
    if eps is None:
        eps = default_hvp_eps(theta)
    u = v / norm
    out = (grad_fn(theta + eps * u) - grad_fn(theta - eps * u)) * (norm / (2.0 * eps))
    if not np.all(np.isfinite(out)):
        raise NonFiniteError("hessian-vector product")
    return out


def hessian_vector_product(network, params: ParameterSet, batch: LabeledBatch, v: GradientSet,
                           eps: float | None = None, temperature: float = 1.0) -> GradientSet:
    """H v for the Hessian of the mean batch loss at ``params``."""
    theta = params.vector()
    vec = v.vector()
    if vec.shape != theta.shape:
        raise ShapeError("hvp", f"direction has {vec.size} entries, parameters have {theta.size}")

    def grad_fn(t):
        return gradients(network, params.from_vector(t), batch, temperature).vector()

    return params.from_vector(finite_difference_hvp(grad_fn, theta, vec, eps))


def numeric_gradient(loss_fn: Callable[[np.ndarray], float], theta: np.ndarray,
                     eps: float = 1e-5, indices: Sequence[int] | None = None) -> np.ndarray:
    """Central finite-difference gradient, optionally only at ``indices``."""
    theta = np.array(theta, dtype=np.float64)
    idx = range(theta.size) if indices is None else indices
    out = np.zeros(theta.size)
    for i in idx:
        old = theta[i]
        theta[i] = old + eps
        hi = loss_fn(theta)
        theta[i] = old - eps
        lo = loss_fn(theta)
        theta[i] = old
        out[i] = (hi - lo) / (2.0 * eps)
    return out
