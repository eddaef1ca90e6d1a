"""Residual linear map from image space into text space.

Depth 0 is the single residual layer v' = v (W + I); the output rows are
re-normalized onto the sphere.  Depth k >= 2 stacks k residual layers with
a rectifier on the transform branch, x -> x + relu(x W), except for the
last layer which stays linear, so every depth is the identity at zero
weights.  Forward returns a tape; backward replays it for exact analytic
gradients including the normalization Jacobian.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import BadConfig, TapeMismatch
from .numerics import normalize_rows, normalize_rows_backward
from .rng import SplitMix64


@dataclass
class MapperParams:
    depth: int                    # 0 = single linear layer, k >= 2 = k layers
    weights: list[np.ndarray]     # each [d, d] float64
    grads: list[np.ndarray]       # matching gradient buffers

    @property
    def dim(self) -> int:
        return int(self.weights[0].shape[0])

    @property
    def num_layers(self) -> int:
        return len(self.weights)

    def zero_grads(self) -> None:
        for g in self.grads:
            g.fill(0.0)


@dataclass
class MapTape:
    """Intermediates cached by map_forward for the matching backward."""

    dim: int
    depth: int
    layer_inputs: list[np.ndarray]   # x_j entering each layer
    preacts: list[np.ndarray]        # x_j @ W_j for rectified layers
    normalized: np.ndarray           # final unit-norm output
    norms: np.ndarray                # row norms before normalization
    batch: int = field(init=False)

    def __post_init__(self) -> None:
        self.batch = int(self.normalized.shape[0])


def init_mapper(dim: int, depth: int, seed: int) -> MapperParams:
    """Kaiming-normal initialization: i.i.d. zero-mean, variance 2/dim."""
    if dim < 1:
        raise BadConfig("dim must be >= 1")
    if depth != 0 and depth < 2:
        raise BadConfig("depth must be 0 (linear) or >= 2 (rectified stack)")
    n_layers = 1 if depth == 0 else depth
    std = np.sqrt(2.0 / dim)
    rng = SplitMix64(seed).derive(0xA11)
    weights = [
        std * rng.normal(dim * dim).reshape(dim, dim) for _ in range(n_layers)
    ]
    grads = [np.zeros((dim, dim)) for _ in range(n_layers)]
    return MapperParams(depth=depth, weights=weights, grads=grads)


def map_forward(params: MapperParams, v_hat: np.ndarray) -> tuple[np.ndarray, MapTape]:
    """Map unit-norm rows and re-normalize; returns (output, tape)."""
    x = np.asarray(v_hat, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.dim:
        raise BadConfig(f"batch shape {x.shape} does not match dim {params.dim}")
    layer_inputs: list[np.ndarray] = []
    preacts: list[np.ndarray] = []
    last = params.num_layers - 1
    for j, w in enumerate(params.weights):
        layer_inputs.append(x)
        p = x @ w
        if j < last:
            preacts.append(p)
            x = x + np.maximum(p, 0.0)
        else:
            x = x + p
    normalized, norms = normalize_rows(x)
    tape = MapTape(
        dim=params.dim,
        depth=params.depth,
        layer_inputs=layer_inputs,
        preacts=preacts,
        normalized=normalized,
        norms=norms,
    )
    return normalized, tape


def map_backward(
    params: MapperParams, tape: MapTape, upstream: np.ndarray
) -> np.ndarray:
    """Accumulate exact gradients into params.grads; returns grad wrt input."""
    upstream = np.asarray(upstream, dtype=np.float64)
    if tape.depth != params.depth or tape.dim != params.dim:
        raise TapeMismatch("tape does not match these parameters")
    if len(tape.layer_inputs) != params.num_layers:
        raise TapeMismatch("tape layer count mismatch")
    if upstream.shape != (tape.batch, tape.dim):
        raise TapeMismatch(
            f"upstream shape {upstream.shape} != ({tape.batch}, {tape.dim})"
        )
    g = normalize_rows_backward(upstream, tape.normalized, tape.norms)
    last = params.num_layers - 1
    for j in range(last, -1, -1):
        x_in = tape.layer_inputs[j]
        if j < last:
            gp = g * (tape.preacts[j] > 0.0)
        else:
            gp = g
        params.grads[j] += x_in.T @ gp
        g = g + gp @ params.weights[j].T
    return g
