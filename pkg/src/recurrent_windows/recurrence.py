"""Window-to-window recurrence: layer mixing, pooling and the carry network.

After a window runs, its per-layer hidden states are mixed with softmax
layer weights, averaged over positions into a pooled summary ``z`` and passed
through a small feed-forward network. The output ``h_prev`` is the carry the
next window sees at the insertion layer.

Parameters (all under the reserved ``recurrence.`` prefix):
    recurrence.alphas          (L,)
    recurrence.ffn.<j>.w/.b    carry_depth hidden layers of width carry_hidden,
                               then a linear output layer to k
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core.rng import Rng
from .core.tensor import (
    Tensor,
    add,
    concat_rows,
    gelu,
    matmul,
    mean_rows,
    reshape,
    scale,
    softmax_rows,
)
from .errors import DimensionError, InputError

logger = logging.getLogger(__name__)

PREFIX = "recurrence."
FFN_INIT_STD = 0.02


@dataclass
class CarryState:
    """Pooled summary ``z`` and carry embedding ``h_prev`` (both length k) after a window."""

    z: Tensor
    h_prev: Tensor
    window_index: int

    def __post_init__(self):
        if self.window_index < 1:
            raise ValueError(f"window_index counts from 1, got {self.window_index}")
        if self.z.shape != self.h_prev.shape or self.z.ndim != 1:
            raise DimensionError(
                f"CarryState vectors must share shape (k,), got {self.z.shape} / {self.h_prev.shape}"
            )


def ffn_layer_shapes(config) -> list[tuple[int, int]]:
    """(fan_in, fan_out) of each carry-FFN layer, output layer last."""
    widths = [config.hidden] + [config.carry_hidden] * config.carry_depth + [config.hidden]
    return list(zip(widths[:-1], widths[1:]))


def recurrence_shapes(config) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {PREFIX + "alphas": (config.layers,)}
    for j, (fan_in, fan_out) in enumerate(ffn_layer_shapes(config)):
        shapes[f"{PREFIX}ffn.{j}.w"] = (fan_in, fan_out)
        shapes[f"{PREFIX}ffn.{j}.b"] = (fan_out,)
    return shapes


def init_recurrence_params(config, rng: Rng) -> dict[str, Tensor]:
    """alphas = 0 (uniform layer weights); FFN weights N(0, 0.02), zero biases.

    With carry_depth = 0 the single linear layer starts as the identity.
    """
    gen = rng.stream("init.recurrence")
    params = {}
    for name, shape in recurrence_shapes(config).items():
        if name.endswith(".b") or name == PREFIX + "alphas":
            value = np.zeros(shape)
        elif config.carry_depth == 0:
            value = np.eye(shape[0], shape[1])
        else:
            value = gen.normal(0.0, FFN_INIT_STD, size=shape)
        params[name] = Tensor(value, name=name)
    return params


def is_recurrence_param(name: str) -> bool:
    return name.startswith(PREFIX)


def layer_weights(alphas: Tensor) -> Tensor:
    """Softmax over the L layer-mixing logits."""
    if alphas.ndim != 1:
        raise DimensionError(f"alphas must be a vector, got shape {alphas.shape}")
    return softmax_rows(alphas)


def pool_window(hiddens: Sequence[Tensor], weights: Tensor, pooling: str = "mean") -> Tensor:
    """Layer-weighted, position-pooled summary of one window.

    z = (1/T) Σ_i Σ_l w_l h_i^(l) for ``pooling="mean"``; ``"sum"`` drops the 1/T.

    Args:
        hiddens: L arrays of shape T×k
        weights: Layer weights, shape (L,)
        pooling: "mean" or "sum"

    Returns:
        z, shape (k,)

    Raises:
        InputError: No layers (empty window)
        DimensionError: Layers disagree on T×k, or len(weights) != L
    """
    if not hiddens:
        raise InputError("pool_window: empty window")
    shape = hiddens[0].shape
    if len(shape) != 2 or any(h.shape != shape for h in hiddens):
        raise DimensionError(f"pool_window: layer shapes {[h.shape for h in hiddens]} differ")
    n_layers = len(hiddens)
    if weights.shape != (n_layers,):
        raise DimensionError(f"pool_window: {weights.shape} weights for {n_layers} layers")
    T, k = shape

    per_layer = concat_rows([mean_rows(h) for h in hiddens])  # L×k
    z = matmul(reshape(weights, (1, n_layers)), per_layer)
    if pooling == "sum":
        z = scale(z, float(T))
    elif pooling != "mean":
        raise ValueError(f"unknown pooling {pooling!r}")
    return reshape(z, (k,))


def carry_ffn(z: Tensor, config, params) -> Tensor:
    """GELU hidden layers, linear output; returns h_prev of shape (k,)."""
    k = config.hidden
    if z.size != k:
        raise DimensionError(f"carry_ffn: expected {k} inputs, got shape {z.shape}")
    x = reshape(z, (1, k))
    depth = config.carry_depth
    for j in range(depth + 1):
        x = add(matmul(x, params[f"{PREFIX}ffn.{j}.w"]), params[f"{PREFIX}ffn.{j}.b"])
        if j < depth:
            x = gelu(x, approximate=config.gelu_approximate)
    return reshape(x, (k,))


def recurrence_step(activations, config, params, window_index: int = 1) -> CarryState:
    """Carry produced by one window: pool its hiddens, then run the carry FFN."""
    weights = layer_weights(params[PREFIX + "alphas"])
    z = pool_window(activations.hiddens, weights, config.pooling)
    h_prev = carry_ffn(z, config, params)
    return CarryState(z=z, h_prev=h_prev, window_index=window_index)
