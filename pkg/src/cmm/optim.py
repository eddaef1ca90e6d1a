"""Decoupled-weight-decay adaptive optimizer and the warmup/cosine schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import BadConfig, NonFiniteGradient, OutOfRange, ShapeMismatch


@dataclass
class OptimState:
    """Per-tensor first/second moment buffers plus the shared step counter."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


@dataclass(frozen=True)
class Schedule:
    """Linear warmup from 0 to lr_base, then cosine annealing to lr_min."""

    warmup_steps: int
    total_steps: int = 16000
    lr_base: float = 1e-4
    lr_min: float = 1e-5

    def __post_init__(self) -> None:
        if not 0 < self.warmup_steps < self.total_steps:
            raise BadConfig(
                f"need 0 < warmup_steps < total_steps, got "
                f"{self.warmup_steps} / {self.total_steps}"
            )
        if self.lr_base < 0 or self.lr_min < 0 or self.lr_min > self.lr_base:
            raise BadConfig("need 0 <= lr_min <= lr_base")


def lr_at(schedule: Schedule, step: int) -> float:
    """Learning rate at an integer step in [0, total_steps]."""
    if not 0 <= step <= schedule.total_steps:
        raise OutOfRange(f"step {step} outside [0, {schedule.total_steps}]")
    if step <= schedule.warmup_steps:
        return schedule.lr_base * step / schedule.warmup_steps
    progress = (step - schedule.warmup_steps) / (
        schedule.total_steps - schedule.warmup_steps
    )
    return float(
        schedule.lr_min
        + 0.5 * (schedule.lr_base - schedule.lr_min) * (1.0 + np.cos(np.pi * progress))
    )


def adamw_step(
    state: OptimState,
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    lr: float,
) -> None:
    """One decoupled update, in place on every tensor in ``params``.

    m <- b1 m + (1-b1) g ; v <- b2 v + (1-b2) g^2 ; with bias-corrected
    m_hat, v_hat:  theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps)
    + weight_decay * theta).
    """
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name, theta in params.items():
        if name not in grads:
            raise ShapeMismatch(f"missing gradient for {name!r}")
        g = grads[name]
        if g.shape != theta.shape:
            raise ShapeMismatch(
                f"{name!r}: grad shape {g.shape} != param shape {theta.shape}"
            )
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient in {name!r}")
        if name not in state.m:
            state.m[name] = np.zeros_like(theta)
            state.v[name] = np.zeros_like(theta)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        theta -= lr * (m_hat / (np.sqrt(v_hat) + state.eps) + state.weight_decay * theta)
