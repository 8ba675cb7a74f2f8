"""Multilayer perceptrons and the Adam optimizer on top of the tape engine."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Node, Parameter, ShapeError

ACTIVATIONS = ("relu", "tanh", "identity")


@dataclass
class Layer:
    weight: Parameter  # (out, in)
    bias: Parameter  # (out, 1)
    activation: str  # relu | tanh | identity


@dataclass
class MlpParams:
    """A stack of affine layers with per-layer activation tags."""

    layers: list[Layer]

    @property
    def in_dim(self) -> int:
        return self.layers[0].weight.value.shape[1]

    @property
    def out_dim(self) -> int:
        return self.layers[-1].weight.value.shape[0]

    def parameters(self) -> list[Parameter]:
        out: list[Parameter] = []
        for layer in self.layers:
            out.append(layer.weight)
            out.append(layer.bias)
        return out


def mlp_init(
    sizes: list[int],
    rng: np.random.Generator,
    name: str,
    hidden_activation: str = "relu",
    out_activation: str = "identity",
) -> MlpParams:
    """Build an MLP with uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) init.

    ``sizes`` lists layer widths input-first, e.g. [20, 64, 1].
    """
    if len(sizes) < 2:
        raise ValueError("mlp_init needs at least an input and an output width")
    for act in (hidden_activation, out_activation):
        if act not in ACTIVATIONS:
            raise ValueError(f"unknown activation {act!r}")
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        bound = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        b = rng.uniform(-bound, bound, size=(fan_out, 1))
        act = out_activation if i == len(sizes) - 2 else hidden_activation
        layers.append(
            Layer(
                Parameter(w, f"{name}.{i}.w"),
                Parameter(b, f"{name}.{i}.b"),
                act,
            )
        )
    return MlpParams(layers)


def _activate(x: Node, tag: str) -> Node:
    if tag == "relu":
        return ad.relu(x)
    if tag == "tanh":
        return ad.tanh(x)
    return x


def mlp_forward(params: MlpParams, x) -> Node:
    """Tape-recorded forward pass: (batch, in) -> (batch, out)."""
    h = x if isinstance(x, Node) else ad.constant(x)
    for i, layer in enumerate(params.layers):
        if h.value.shape[1] != layer.weight.value.shape[1]:
            raise ShapeError(
                f"mlp_forward: layer {i} expects {layer.weight.value.shape[1]} "
                f"input columns, got {h.value.shape[1]}"
            )
        h = _activate(ad.linear(h, layer.weight, layer.bias), layer.activation)
    return h


def mlp_apply(params: MlpParams, x: np.ndarray) -> np.ndarray:
    """Tape-free forward pass with arithmetic identical to mlp_forward."""
    h = ad.as_matrix(x)
    for i, layer in enumerate(params.layers):
        if h.shape[1] != layer.weight.value.shape[1]:
            raise ShapeError(
                f"mlp_apply: layer {i} expects {layer.weight.value.shape[1]} "
                f"input columns, got {h.shape[1]}"
            )
        h = h @ layer.weight.value.T + layer.bias.value.T
        if layer.activation == "relu":
            h = np.maximum(h, 0.0)
        elif layer.activation == "tanh":
            h = np.tanh(h)
    return h


@dataclass
class AdamState:
    """First/second-moment accumulators keyed by parameter identity order."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def ensure(self, params: list[Parameter]) -> None:
        if not self.m:
            self.m = [np.zeros_like(p.value) for p in params]
            self.v = [np.zeros_like(p.value) for p in params]
        elif len(self.m) != len(params):
            raise ShapeError("AdamState tracks a different parameter count")


def adam_step(
    params: list[Parameter],
    grads: list[np.ndarray] | None,
    state: AdamState,
) -> None:
    """One bias-corrected Adam update, in place.

    ``grads`` may be None to consume each parameter's ``.grad`` slot.
    """
    if grads is None:
        grads = []
        for p in params:
            grads.append(p.grad if p.grad is not None else np.zeros_like(p.value))
    if len(grads) != len(params):
        raise ShapeError("adam_step: one gradient per parameter required")
    state.ensure(params)
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.value.shape:
            raise ShapeError(
                f"adam_step: gradient shape {g.shape} != parameter {p.value.shape}"
            )
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        p.value = p.value - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
