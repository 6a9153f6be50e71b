"""Small feed-forward networks on top of the tape autodiff.

Dense weights are stored ``(out, in)`` and conv weights ``(out, in, kh, kw)``.
Weights are prunable; biases never are.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Variable
from .container import read_container, write_container


@dataclass(frozen=True)
class Dense:
    in_features: int
    out_features: int


@dataclass(frozen=True)
class Conv2d:
    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1
    padding: int = 0


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class Tanh:
    pass


@dataclass(frozen=True)
class Flatten:
    pass


Layer = Union[Dense, Conv2d, ReLU, Tanh, Flatten]


@dataclass(frozen=True)
class ModelSpec:
    """Layer list plus input shape (C, H, W) and class count."""

    layers: tuple
    input_shape: tuple
    num_classes: int
    name: str = "model"

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        out = self.output_shape()
        if out != (self.num_classes,):
            raise ShapeError(f"{self.name}: final output {out} does not match {self.num_classes} classes")

    def output_shape(self) -> tuple:
        shape = self.input_shape
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Flatten):
                shape = (int(np.prod(shape)),)
            elif isinstance(layer, Dense):
                if shape != (layer.in_features,):
                    raise ShapeError(f"{self.name} layer {i}: dense expects ({layer.in_features},), got {shape}")
                shape = (layer.out_features,)
            elif isinstance(layer, Conv2d):
                if len(shape) != 3 or shape[0] != layer.in_channels:
                    raise ShapeError(f"{self.name} layer {i}: conv expects {layer.in_channels} channels, got {shape}")
                c, h, w = shape
                oh = (h + 2 * layer.padding - layer.kernel) // layer.stride + 1
                ow = (w + 2 * layer.padding - layer.kernel) // layer.stride + 1
                if oh < 1 or ow < 1:
                    raise ShapeError(f"{self.name} layer {i}: kernel does not fit input {shape}")
                shape = (layer.out_channels, oh, ow)
        return shape

    def param_layout(self) -> list[tuple[str, tuple, bool]]:
        """``(name, shape, prunable)`` for every parameter, in forward order."""
        layout = []
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Dense):
                layout.append((f"l{i}.weight", (layer.out_features, layer.in_features), True))
                layout.append((f"l{i}.bias", (layer.out_features,), False))
            elif isinstance(layer, Conv2d):
                k = layer.kernel
                layout.append((f"l{i}.weight", (layer.out_channels, layer.in_channels, k, k), True))
                layout.append((f"l{i}.bias", (layer.out_channels,), False))
        return layout


def mlp(sizes: Sequence[int], name: str = "mlp", activation=ReLU, input_shape=None) -> ModelSpec:
    layers: list = [Flatten()]
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        layers.append(Dense(a, b))
        if i < len(sizes) - 2:
            layers.append(activation())
    return ModelSpec(layers, input_shape or (1, 1, sizes[0]), sizes[-1], name)


def reference_spec(name: str, input_shape=None, num_classes: int = 10) -> ModelSpec:
    """Named desk-scale architectures used by the experiment configs."""
    if name == "mlp":
        return mlp([784, 300, 100, num_classes], "mlp", input_shape=input_shape or (1, 28, 28))
    if name == "deep_mlp":
        return mlp([784, 100, 100, 100, 100, 100, num_classes], "deep_mlp", input_shape=input_shape or (1, 28, 28))
    if name == "convnet":
        layers = [
            Conv2d(1, 8, 5, stride=2, padding=2), ReLU(),
            Conv2d(8, 16, 5, stride=2, padding=2), ReLU(),
            Flatten(), Dense(16 * 7 * 7, 64), ReLU(), Dense(64, num_classes),
        ]
        return ModelSpec(layers, input_shape or (1, 28, 28), num_classes, "convnet")
    raise ValueError(f"unknown reference model {name!r}")


class ParamSet:
    """Ordered named parameter tensors with a fixed flattening of prunable elements.

    The global flat index runs over prunable tensors in order, each flattened
    row-major.
    """

    def __init__(self, entries: Sequence[tuple[str, np.ndarray, bool]]):
        names = [n for n, _, _ in entries]
        if len(set(names)) != len(names):
            raise ValueError("parameter names must be unique")
        self.names = names
        self.tensors = [np.asarray(t, dtype=np.float64) for _, t, _ in entries]
        self.prunable = [bool(p) for _, _, p in entries]
        self._offsets = []
        off = 0
        for t, p in zip(self.tensors, self.prunable):
            self._offsets.append(off if p else None)
            off += t.size if p else 0
        self.d = off

    def __len__(self) -> int:
        return len(self.tensors)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[self.names.index(name)]

    def layout(self) -> list[tuple[str, tuple, bool]]:
        return [(n, t.shape, p) for n, t, p in zip(self.names, self.tensors, self.prunable)]

    def copy(self) -> "ParamSet":
        return ParamSet([(n, t.copy(), p) for n, t, p in zip(self.names, self.tensors, self.prunable)])

    def with_tensors(self, tensors: Sequence[np.ndarray]) -> "ParamSet":
        return ParamSet(list(zip(self.names, tensors, self.prunable)))

    @property
    def prunable_indices(self) -> list[int]:
        return [i for i, p in enumerate(self.prunable) if p]

    def flatten(self, tensors: Sequence[np.ndarray] | None = None) -> np.ndarray:
        """Concatenate the prunable entries of ``tensors`` (default: own values)."""
        tensors = self.tensors if tensors is None else tensors
        parts = [np.asarray(tensors[i], dtype=np.float64).ravel() for i in self.prunable_indices]
        return np.concatenate(parts) if parts else np.zeros(0)

    def unflatten(self, flat: np.ndarray, fill: float = 1.0) -> list[np.ndarray]:
        """Inverse of ``flatten``; non-prunable tensors are filled with ``fill``."""
        flat = np.asarray(flat)
        if flat.shape != (self.d,):
            raise ShapeError(f"flat vector has shape {flat.shape}, expected ({self.d},)")
        out = []
        for t, p, off in zip(self.tensors, self.prunable, self._offsets):
            if p:
                out.append(flat[off : off + t.size].reshape(t.shape).astype(np.float64))
            else:
                out.append(np.full(t.shape, fill, dtype=np.float64))
        return out

    def locate(self, flat_index: int) -> tuple[str, tuple]:
        """Map a global flat index to ``(name, index within that tensor)``."""
        if not 0 <= flat_index < self.d:
            raise IndexError(flat_index)
        for name, t, p, off in zip(self.names, self.tensors, self.prunable, self._offsets):
            if p and off <= flat_index < off + t.size:
                return name, np.unravel_index(flat_index - off, t.shape)
        raise AssertionError("unreachable")

    def global_index(self, name: str, index) -> int:
        i = self.names.index(name)
        if not self.prunable[i]:
            raise ValueError(f"{name} is not prunable")
        return self._offsets[i] + int(np.ravel_multi_index(index, self.tensors[i].shape))

    def attach(self, tape: ad.Tape) -> list[Variable]:
        return [tape.leaf(t) for t in self.tensors]

    def save(self, path, meta: dict | None = None):
        entries = [
            {"name": n, "array": t, "prunable": p} for n, t, p in zip(self.names, self.tensors, self.prunable)
        ]
        return write_container(path, "paramset", entries, meta)

    @classmethod
    def load(cls, path) -> "ParamSet":
        header, arrays = read_container(path, kind="paramset")
        return cls([(e["name"], arrays[e["name"]], e["prunable"]) for e in header["entries"]])


INIT_SCHEMES = ("kaiming", "xavier", "normal")


def _fans(shape: tuple) -> tuple[int, int]:
    receptive = int(np.prod(shape[2:])) if len(shape) > 2 else 1
    return shape[1] * receptive, shape[0] * receptive


def init_params(spec: ModelSpec, scheme: str = "kaiming", seed: int = 0) -> ParamSet:
    """Draw weights by ``scheme`` (kaiming / xavier normal, or N(0, 0.1)); zero biases."""
    if scheme not in INIT_SCHEMES:
        raise ValueError(f"unknown init scheme {scheme!r}; choose from {INIT_SCHEMES}")
    rng = np.random.default_rng(seed)
    entries = []
    for name, shape, prunable in spec.param_layout():
        if not prunable:
            entries.append((name, np.zeros(shape), False))
            continue
        fan_in, fan_out = _fans(shape)
        if scheme == "kaiming":
            std = math.sqrt(2.0 / fan_in)
        elif scheme == "xavier":
            std = math.sqrt(2.0 / (fan_in + fan_out))
        else:
            std = 0.1
        entries.append((name, rng.normal(0.0, std, size=shape), True))
    return ParamSet(entries)


def forward(spec: ModelSpec, params, x, mask=None) -> Variable:
    """Logits of shape (batch, k).

    ``params`` is a ParamSet (treated as constants) or one Variable/array per
    parameter. With ``mask`` every prunable weight is used as ``mask * weight``
    inside the tape, so gradients of removed weights are exactly zero.
    """
    tensors = params.tensors if isinstance(params, ParamSet) else list(params)
    layout = spec.param_layout()
    if len(tensors) != len(layout):
        raise ShapeError(f"expected {len(layout)} parameter tensors, got {len(tensors)}")
    ws = [ad.as_variable(t) for t in tensors]
    for w, (name, shape, _) in zip(ws, layout):
        if w.shape != tuple(shape):
            raise ShapeError(f"parameter {name} has shape {w.shape}, expected {tuple(shape)}")
    if mask is not None:
        mtensors = mask.tensors if hasattr(mask, "tensors") else list(mask)
        if len(mtensors) != len(ws):
            raise ShapeError("mask is not aligned with the parameter set")
        ws = [ad.mul(w, m) if p else w for w, m, (_, _, p) in zip(ws, mtensors, layout)]

    h = ad.as_variable(x)
    # a flattening first layer accepts any input with the right element count
    flat_ok = isinstance(spec.layers[0], Flatten) and int(np.prod(h.shape[1:])) == int(np.prod(spec.input_shape))
    if h.shape[1:] != spec.input_shape and not flat_ok:
        raise ShapeError(f"input shape {h.shape[1:]} does not match model input {spec.input_shape}")
    it = iter(ws)
    for layer in spec.layers:
        if isinstance(layer, Flatten):
            h = ad.reshape(h, (h.shape[0], -1))
        elif isinstance(layer, Dense):
            w, b = next(it), next(it)
            h = ad.add(ad.matmul(h, ad.transpose(w)), b)
        elif isinstance(layer, Conv2d):
            w, b = next(it), next(it)
            h = ad.conv2d(h, w, b, stride=layer.stride, pad=layer.padding)
        elif isinstance(layer, ReLU):
            h = ad.relu(h)
        elif isinstance(layer, Tanh):
            h = ad.tanh(h)
    return h


def softmax_cross_entropy(logits, labels, temperature: float = 1.0) -> Variable:
    """Mean over the batch of ``-log softmax(logits / T)[label]``."""
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    logits = ad.as_variable(logits)
    labels = np.asarray(labels, dtype=np.int64).ravel()
    n, k = logits.shape
    if labels.shape[0] != n:
        raise ShapeError(f"{labels.shape[0]} labels for {n} rows of logits")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    z = logits if temperature == 1.0 else ad.mul(logits, 1.0 / temperature)
    # shift by the (constant) row max; log-sum-exp is invariant to it
    shifted = ad.sub(z, z.value.max(axis=1, keepdims=True))
    lse = ad.log(ad.sum(ad.exp(shifted), axis=1, keepdims=True))
    return ad.mean(ad.sub(lse, ad.gather(shifted, labels)))


def squared_error(outputs, targets) -> Variable:
    """``0.5 * sum((outputs - targets) ** 2)`` (summed, not averaged)."""
    r = ad.sub(outputs, np.asarray(targets, dtype=np.float64).reshape(ad.as_variable(outputs).shape))
    return ad.mul(ad.sum(ad.mul(r, r)), 0.5)


def loss_fn(spec: ModelSpec, temperature: float = 1.0, mask=None):
    """Build ``f(variables, batch)`` computing the cross-entropy on ``batch.x, batch.y``."""

    def f(variables, batch):
        return softmax_cross_entropy(forward(spec, variables, batch.x, mask), batch.y, temperature)

    return f
