"""Feedforward ReLU networks: data model, evaluation, concatenation and JSON IO."""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np


class NetworkError(ValueError):
    """Raised for malformed or dimensionally inconsistent networks."""


class Activation(str, enum.Enum):
    RELU = "relu"
    IDENTITY = "identity"


@dataclass(frozen=True, eq=False)
class Layer:
    weights: np.ndarray
    bias: np.ndarray
    activation: Activation = Activation.IDENTITY

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64, ndmin=2)
        b = np.array(self.bias, dtype=np.float64).reshape(-1)
        if w.ndim != 2:
            raise NetworkError(f"weights must be a matrix, got shape {w.shape}")
        if w.shape[0] != b.shape[0]:
            raise NetworkError(
                f"weights has {w.shape[0]} rows but bias has length {b.shape[0]}"
            )
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise NetworkError("layer parameters must be finite")
        w.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)
        object.__setattr__(self, "activation", Activation(self.activation))

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]

    def __eq__(self, other):
        if not isinstance(other, Layer):
            return NotImplemented
        return (
            self.activation == other.activation
            and np.array_equal(self.weights, other.weights)
            and np.array_equal(self.bias, other.bias)
        )


@dataclass(frozen=True, eq=False)
class Network:
    """An immutable stack of affine layers with optional ReLU activations.

    ``input_lo``/``input_hi`` optionally declare the box of inputs the network
    is meant to be used on; the verifier reads state/latent bounds from it.
    """

    layers: tuple[Layer, ...]
    input_names: tuple[str, ...] = ()
    input_lo: np.ndarray | None = None
    input_hi: np.ndarray | None = None

    def __post_init__(self):
        layers = tuple(self.layers)
        if not layers:
            raise NetworkError("network needs at least one layer")
        for k in range(1, len(layers)):
            if layers[k].in_dim != layers[k - 1].out_dim:
                raise NetworkError(
                    f"layer {k} expects {layers[k].in_dim} inputs but layer {k - 1} "
                    f"produces {layers[k - 1].out_dim}"
                )
        if layers[-1].activation is not Activation.IDENTITY:
            raise NetworkError("final layer activation must be identity")
        object.__setattr__(self, "layers", layers)
        d = layers[0].in_dim
        names = tuple(self.input_names) or tuple(f"x{i}" for i in range(d))
        if len(names) != d:
            raise NetworkError(f"got {len(names)} input names for {d} inputs")
        object.__setattr__(self, "input_names", names)
        for attr in ("input_lo", "input_hi"):
            v = getattr(self, attr)
            if v is not None:
                v = np.array(v, dtype=np.float64).reshape(-1)
                if v.shape[0] != d:
                    raise NetworkError(f"{attr} has length {v.shape[0]}, expected {d}")
                v.setflags(write=False)
                object.__setattr__(self, attr, v)
        if (self.input_lo is None) != (self.input_hi is None):
            raise NetworkError("input_lo and input_hi must be given together")
        if self.input_lo is not None and np.any(self.input_lo > self.input_hi):
            raise NetworkError("input_lo must not exceed input_hi")

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def output_dim(self) -> int:
        return self.layers[-1].out_dim

    def index_of(self, name: str) -> int:
        try:
            return self.input_names.index(name)
        except ValueError:
            raise NetworkError(f"network has no input named {name!r}") from None

    @cached_property
    def affine_blocks(self) -> tuple[tuple[np.ndarray, np.ndarray, bool], ...]:
        """Layers with every identity-activated hidden layer folded into its successor.

        Returns ``(W, b, relu)`` triples computing the same function as
        ``layers``; used by the abstract interpreter, where composing affine
        maps before relaxing is exact and shrinks the generator matrices.
        """
        blocks = []
        w, b = None, None
        for layer in self.layers:
            if w is None:
                w, b = layer.weights, layer.bias
            else:
                w, b = layer.weights @ w, layer.weights @ b + layer.bias
            if layer.activation is Activation.RELU:
                blocks.append((w, b, True))
                w, b = None, None
        if w is not None:
            blocks.append((w, b, False))
        return tuple(blocks)

    def __eq__(self, other):
        if not isinstance(other, Network):
            return NotImplemented

        def same(a, b):
            if a is None or b is None:
                return a is None and b is None
            return np.array_equal(a, b)

        return (
            self.layers == other.layers
            and self.input_names == other.input_names
            and same(self.input_lo, other.input_lo)
            and same(self.input_hi, other.input_hi)
        )


def identity(dim: int) -> Network:
    return Network((Layer(np.eye(dim), np.zeros(dim), Activation.IDENTITY),))


def evaluate(net: Network, x) -> np.ndarray:
    """Exact forward pass; ``x`` may be a single input or a batch of rows."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1:] != (net.input_dim,):
        raise NetworkError(
            f"input has dimension {x.shape[-1] if x.ndim else 0}, "
            f"network expects {net.input_dim}"
        )
    if not np.all(np.isfinite(x)):
        raise NetworkError("input must be finite")
    h = x
    for layer in net.layers:
        h = h @ layer.weights.T + layer.bias
        if layer.activation is Activation.RELU:
            h = np.maximum(h, 0.0)
    return h


def concatenate(g: Network, c: Network) -> Network:
    """Network computing ``c(g(x))``; input metadata comes from ``g``."""
    if g.output_dim != c.input_dim:
        raise NetworkError(
            f"cannot feed {g.output_dim} outputs into a network expecting {c.input_dim}"
        )
    return Network(g.layers + c.layers, g.input_names, g.input_lo, g.input_hi)


# -- serialization -----------------------------------------------------------


def to_dict(net: Network) -> dict:
    return {
        "input_dim": net.input_dim,
        "output_dim": net.output_dim,
        "input_names": list(net.input_names),
        "input_lo": None if net.input_lo is None else net.input_lo.tolist(),
        "input_hi": None if net.input_hi is None else net.input_hi.tolist(),
        "layers": [
            {
                "weights": layer.weights.tolist(),
                "bias": layer.bias.tolist(),
                "activation": layer.activation.value,
            }
            for layer in net.layers
        ],
    }


def _field(d: dict, key: str, where: str):
    if key not in d:
        raise NetworkError(f"missing field {where}{key!r}")
    return d[key]


def from_dict(d: dict) -> Network:
    if not isinstance(d, dict):
        raise NetworkError("network document must be a JSON object")
    raw_layers = _field(d, "layers", "")
    if not isinstance(raw_layers, list):
        raise NetworkError("field 'layers' must be a list")
    layers = []
    for k, raw in enumerate(raw_layers):
        where = f"layers[{k}]."
        try:
            act = Activation(_field(raw, "activation", where))
        except ValueError:
            raise NetworkError(f"field {where}'activation' must be 'relu' or 'identity'") from None
        try:
            w = np.array(_field(raw, "weights", where), dtype=np.float64)
            b = np.array(_field(raw, "bias", where), dtype=np.float64)
        except (TypeError, ValueError) as exc:
            raise NetworkError(f"non-numeric entries in {where[:-1]}: {exc}") from None
        if w.ndim != 2:
            raise NetworkError(f"field {where}'weights' must be a list of rows")
        if b.ndim != 1:
            raise NetworkError(f"field {where}'bias' must be a flat list")
        try:
            layers.append(Layer(w, b, act))
        except NetworkError as exc:
            raise NetworkError(f"{where[:-1]}: {exc}") from None
    net = Network(
        tuple(layers),
        tuple(_field(d, "input_names", "")),
        d.get("input_lo"),
        d.get("input_hi"),
    )
    if _field(d, "input_dim", "") != net.input_dim:
        raise NetworkError(
            f"field 'input_dim' says {d['input_dim']} but layers take {net.input_dim}"
        )
    if _field(d, "output_dim", "") != net.output_dim:
        raise NetworkError(
            f"field 'output_dim' says {d['output_dim']} but layers give {net.output_dim}"
        )
    return net


def dumps(net: Network) -> str:
    # json writes floats with repr(), which round-trips float64 exactly
    return json.dumps(to_dict(net))


def save(net: Network, path) -> None:
    Path(path).write_text(dumps(net) + "\n")


def load(path) -> Network:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise NetworkError(f"{path}: not valid JSON ({exc})") from None
    return from_dict(doc)


def mlp(sizes: Sequence[int], rng: np.random.Generator, **meta) -> Network:
    """Randomly initialised ReLU MLP with uniform Glorot weights and zero biases."""
    layers = []
    for k, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        r = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-r, r, size=(fan_out, fan_in))
        last = k == len(sizes) - 2
        layers.append(
            Layer(w, np.zeros(fan_out), Activation.IDENTITY if last else Activation.RELU)
        )
    return Network(tuple(layers), **meta)
