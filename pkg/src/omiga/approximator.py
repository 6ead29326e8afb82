"""Small multilayer perceptrons with hand-written reverse-mode gradients.

Every network in the trainer (local Q/V/policy nets and the mixer's weight
and offset nets) is an :class:`Mlp`.  Inputs may be a single vector of shape
``(in,)`` or a batch of shape ``(batch, in)``; for a batch, :func:`backward`
returns parameter gradients summed over rows.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import NumericError, ParameterError, ShapeError

ACTIVATIONS = ("relu", "identity")


@dataclass
class Layer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = "identity"

    @property
    def shape(self) -> tuple[int, int]:
        return self.weight.shape


class Mlp:
    """Layer list whose weights and biases are views into one flat vector ``theta``."""

    def __init__(self, layers: list[Layer], theta: np.ndarray | None = None):
        if not layers:
            raise ShapeError("an Mlp needs at least one layer")
        for k, layer in enumerate(layers):
            if layer.activation not in ACTIVATIONS:
                raise ParameterError(f"unknown activation {layer.activation!r}")
            if layer.weight.ndim != 2 or layer.bias.shape != (layer.weight.shape[0],):
                raise ShapeError(f"layer {k}: bias {layer.bias.shape} vs weight {layer.weight.shape}")
            if k > 0 and layers[k - 1].weight.shape[0] != layer.weight.shape[1]:
                raise ShapeError(
                    f"layer {k} expects {layer.weight.shape[1]} inputs, "
                    f"previous layer emits {layers[k - 1].weight.shape[0]}"
                )
        self.shapes = tuple(l.weight.shape for l in layers)
        self.activations = tuple(l.activation for l in layers)
        if theta is None:
            theta = np.concatenate([np.concatenate([l.weight.ravel(), l.bias.ravel()]) for l in layers])
            theta = theta.astype(np.float64)
        self.theta = theta
        self._layers = None

    @property
    def layers(self) -> list[Layer]:
        if self._layers is None:
            self._layers = self._views(self.theta)
        return self._layers

    def _views(self, theta: np.ndarray) -> list[Layer]:
        layers, pos = [], 0
        for (rows, cols), act in zip(self.shapes, self.activations):
            w = theta[pos : pos + rows * cols].reshape(rows, cols)
            pos += rows * cols
            layers.append(Layer(w, theta[pos : pos + rows], act))
            pos += rows
        return layers

    def with_theta(self, theta: np.ndarray) -> "Mlp":
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != self.theta.shape:
            raise ShapeError(f"expected {self.theta.size} values, got {theta.shape}")
        out = Mlp.__new__(Mlp)
        out.shapes, out.activations, out.theta = self.shapes, self.activations, theta
        out._layers = None
        return out

    @property
    def input_dim(self) -> int:
        return self.shapes[0][1]

    @property
    def output_dim(self) -> int:
        return self.shapes[-1][0]

    def copy(self) -> "Mlp":
        return self.with_theta(self.theta.copy())

    def zeros_like(self) -> "Mlp":
        return self.with_theta(np.zeros_like(self.theta))

    def num_params(self) -> int:
        return self.theta.size

    def flat(self) -> np.ndarray:
        return self.theta.copy()

    def with_flat(self, vec: np.ndarray) -> "Mlp":
        return self.with_theta(np.array(vec, dtype=np.float64))

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.theta)))

    def same_shape(self, other: "Mlp") -> bool:
        return self.shapes == other.shapes


def init_mlp(sizes: Sequence[int], rng: np.random.Generator) -> Mlp:
    """Build an MLP with layer widths ``sizes`` (input first, output last).

    Weights and biases are drawn from U[-1/sqrt(fan_in), 1/sqrt(fan_in)].
    Hidden layers use ReLU, the output layer is linear.
    """
    if len(sizes) < 2 or any(int(s) < 1 for s in sizes):
        raise ParameterError(f"invalid layer sizes {list(sizes)}")
    layers = []
    for k, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        bound = 1.0 / math.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        b = rng.uniform(-bound, bound, size=fan_out)
        act = "identity" if k == len(sizes) - 2 else "relu"
        layers.append(Layer(w, b, act))
    return Mlp(layers)


@dataclass
class Tape:
    params: Mlp
    inputs: list[np.ndarray]  # input to each layer, always 2-D
    vector_input: bool


def forward(params: Mlp, x) -> tuple[np.ndarray, Tape]:
    x = np.asarray(x, dtype=np.float64)
    vector_input = x.ndim == 1
    h = x[None, :] if vector_input else x
    if h.ndim != 2 or h.shape[1] != params.input_dim:
        raise ShapeError(f"input of shape {x.shape} does not match input_dim={params.input_dim}")
    inputs = []
    for layer in params.layers:
        inputs.append(h)
        h = h @ layer.weight.T
        h += layer.bias
        if layer.activation == "relu":
            np.maximum(h, 0.0, out=h)
    out = h[0] if vector_input else h
    inputs.append(h)
    return out, Tape(params, inputs, vector_input)


def predict(params: Mlp, x) -> np.ndarray:
    """Forward pass without keeping a tape."""
    return forward(params, x)[0]


def backward(tape: Tape, upstream, return_input_grad: bool = False):
    """Gradients of ``sum(upstream * output)`` w.r.t. every parameter."""
    g = np.asarray(upstream, dtype=np.float64)
    if tape.vector_input and g.ndim == 1:
        g = g[None, :]
    params = tape.params
    batch = tape.inputs[0].shape[0]
    if g.shape != (batch, params.output_dim):
        raise ShapeError(f"upstream shape {np.shape(upstream)} does not match output ({batch}, {params.output_dim})")
    grads = params.zeros_like()
    for k in range(len(params.layers) - 1, -1, -1):
        layer = params.layers[k]
        if layer.activation == "relu":
            # relu output is positive exactly where the pre-activation is
            g = g * (tape.inputs[k + 1] > 0.0)
        np.matmul(g.T, tape.inputs[k], out=grads.layers[k].weight)
        np.sum(g, axis=0, out=grads.layers[k].bias)
        if k > 0 or return_input_grad:
            g = g @ layer.weight
    if return_input_grad:
        return grads, (g[0] if tape.vector_input else g)
    return grads


def add_grads(a: Mlp, b: Mlp) -> Mlp:
    if not a.same_shape(b):
        raise ShapeError("gradient shapes differ")
    return a.with_theta(a.theta + b.theta)


@dataclass
class AdamState:
    m: Mlp
    v: Mlp
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0

    @classmethod
    def create(cls, params: Mlp, lr: float = 5e-4, **kw) -> "AdamState":
        if not lr > 0:
            raise ParameterError(f"learning rate must be positive, got {lr}")
        return cls(params.zeros_like(), params.zeros_like(), lr=lr, **kw)


def adam_step(params: Mlp, grads: Mlp, state: AdamState) -> tuple[Mlp, AdamState]:
    """One bias-corrected Adam update; returns new params and state."""
    if not (params.same_shape(grads) and params.same_shape(state.m)):
        raise ShapeError("params, grads and optimizer state disagree in shape")
    g = grads.theta
    if not np.all(np.isfinite(g)):
        raise NumericError(f"non-finite gradient at optimizer step {state.step + 1}")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    m = b1 * state.m.theta + (1.0 - b1) * g
    v = b2 * state.v.theta + (1.0 - b2) * (g * g)
    step_size = state.lr / (1.0 - b1**t)
    denom = np.sqrt(v / (1.0 - b2**t))
    denom += state.eps
    theta = params.theta - step_size * m / denom
    new_state = AdamState(state.m.with_theta(m), state.v.with_theta(v), state.lr, b1, b2, state.eps, t)
    return params.with_theta(theta), new_state


def soft_update(target: Mlp, online: Mlp, tau: float) -> Mlp:
    if not 0.0 <= tau <= 1.0:
        raise ParameterError(f"tau must lie in [0, 1], got {tau}")
    if not target.same_shape(online):
        raise ShapeError("target and online networks differ in shape")
    return target.with_theta((1.0 - tau) * target.theta + tau * online.theta)


# Checkpoint layout: {name: [{"rows", "cols", "activation", "weights", "bias"}, ...]},
# weights stored row-major as a flat list of length rows*cols.


def mlp_to_json(params: Mlp) -> list[dict]:
    return [
        {
            "rows": int(l.weight.shape[0]),
            "cols": int(l.weight.shape[1]),
            "activation": l.activation,
            "weights": [float(x) for x in l.weight.ravel()],
            "bias": [float(x) for x in l.bias],
        }
        for l in params.layers
    ]


def mlp_from_json(doc: list[dict]) -> Mlp:
    layers = []
    for k, entry in enumerate(doc):
        try:
            rows, cols = int(entry["rows"]), int(entry["cols"])
            w = np.asarray(entry["weights"], dtype=np.float64)
            b = np.asarray(entry["bias"], dtype=np.float64)
            act = entry.get("activation", "identity")
        except (KeyError, TypeError) as exc:
            raise ShapeError(f"layer {k}: malformed entry ({exc})") from exc
        if w.size != rows * cols:
            raise ShapeError(f"layer {k}: {w.size} weights for a {rows}x{cols} matrix")
        layers.append(Layer(w.reshape(rows, cols), b, act))
    return Mlp(layers)


@dataclass
class NetworkSet:
    """Named collection of networks, serialized as one JSON checkpoint."""

    nets: dict[str, Mlp] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {name: mlp_to_json(net) for name, net in sorted(self.nets.items())}

    @classmethod
    def from_json(cls, doc: dict) -> "NetworkSet":
        return cls({name: mlp_from_json(layers) for name, layers in doc.items()})
