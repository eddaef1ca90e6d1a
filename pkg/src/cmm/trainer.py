"""Training loop: batching, fused forward, backward, optimizer, checkpoints.

Only the mapper weights and the trainable prototype matrix receive
updates; the frozen prototypes and every cache array stay untouched.
Zero-shot scores for the shot set are computed once up front since both of
their inputs are frozen.

Checkpoint directory layout mirrors the embedding cache convention with a
distinct magic value: ``manifest.json`` with ``format: "CMMK"`` plus
``w<j>.f64`` / ``t_ft.f64`` / ``t_init.f64`` blobs holding raw
little-endian float64, row-major.  Parameters are stored at full precision
so a reloaded checkpoint reproduces evaluation bit-for-bit.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from .errors import (
    BadConfig,
    BadMagic,
    BadVersion,
    DimensionMismatch,
    IoError,
    MissingFile,
    NonFiniteLoss,
)
from .losses import LossConfig, cross_entropy, cmm_scores, total_loss, triplet_loss
from .mapper import MapperParams, init_mapper, map_backward, map_forward
from .numerics import normalize_columns, normalize_columns_backward
from .optim import OptimState, Schedule, adamw_step, lr_at
from .prototypes import build_text_prototypes
from .rng import SplitMix64
from .store import EmbeddingCache, FewShotTask

CHECKPOINT_MAGIC = "CMMK"
CHECKPOINT_VERSION = 1
WARMUP_EPOCHS = 50


@dataclass(frozen=True)
class TrainConfig:
    shots: int = 16
    seed: int = 0
    batch_size: int = 8
    total_steps: int = 16000
    alpha_train: float = 1.0
    margin: float = 1.0
    temperature: float = 0.01
    logit_scale: float | None = None    # None = 1 / temperature
    depth: int = 0
    lr: float = 1e-4
    weight_decay: float = 1e-4
    lr_min: float = 1e-5
    warmup_steps: int | None = None     # None = 50 epochs over the shot set

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise BadConfig("batch_size must be >= 1")
        if self.total_steps < 1:
            raise BadConfig("total_steps must be >= 1")
        if self.alpha_train < 0:
            raise BadConfig("alpha_train must be >= 0")
        _ = self.loss_config   # temperature/margin/logit_scale constraints

    @property
    def loss_config(self) -> LossConfig:
        return LossConfig(
            temperature=self.temperature,
            margin=self.margin,
            logit_scale=self.logit_scale,
        )


@dataclass
class Checkpoint:
    dim: int
    depth: int
    weights: list[np.ndarray]    # mapper layers, float64
    t_ft: np.ndarray             # [d, N] float64
    t_init: np.ndarray           # [d, N] float64
    config: TrainConfig
    final_loss: float
    version: int = CHECKPOINT_VERSION

    @property
    def num_classes(self) -> int:
        return int(self.t_init.shape[1])

    def mapper(self) -> MapperParams:
        return MapperParams(
            depth=self.depth,
            weights=[w.copy() for w in self.weights],
            grads=[np.zeros_like(w) for w in self.weights],
        )


def make_schedule(config: TrainConfig, train_rows: int) -> Schedule:
    """Schedule with warmup defaulting to 50 passes over the shot set."""
    if config.warmup_steps is not None:
        warmup = config.warmup_steps
    else:
        steps_per_epoch = math.ceil(train_rows / config.batch_size)
        warmup = WARMUP_EPOCHS * steps_per_epoch
    warmup = max(1, min(warmup, config.total_steps - 1))
    return Schedule(
        warmup_steps=warmup,
        total_steps=config.total_steps,
        lr_base=config.lr,
        lr_min=config.lr_min,
    )


@dataclass
class StepStats:
    loss: float
    ce: float
    triplet: float


def loss_and_grads(
    mapper: MapperParams,
    t_ft: np.ndarray,
    grad_t_ft: np.ndarray,
    v_hat: np.ndarray,
    labels: np.ndarray,
    s_clip_scaled: np.ndarray,
    config: TrainConfig,
) -> StepStats:
    """One fused forward/backward pass.

    Zeroes then fills ``mapper.grads`` and ``grad_t_ft``.  The cross-entropy
    path scores the batch against the raw prototype columns; the triplet
    path re-normalizes them on the fly, and both the mapped anchor and the
    prototypes receive triplet gradient.
    """
    scale = config.loss_config.scale
    mapper.zero_grads()
    grad_t_ft.fill(0.0)

    v_prime, tape = map_forward(mapper, v_hat)
    s_cmm = cmm_scores(v_prime, t_ft)
    fused = scale * config.alpha_train * s_cmm + s_clip_scaled
    ce, grad_fused = cross_entropy(fused, labels)

    t_hat, t_norms = normalize_columns(t_ft)
    trip = triplet_loss(v_prime, t_hat, labels, config.margin)
    if np.isfinite(ce) and np.isfinite(trip.loss):
        loss = total_loss(ce, trip.loss)
    else:
        loss = float("nan")   # train() reports the failing step

    grad_s_cmm = (scale * config.alpha_train) * grad_fused
    grad_t_ft += v_prime.T @ grad_s_cmm
    grad_t_ft += normalize_columns_backward(trip.grad_prototypes, t_hat, t_norms)
    grad_v_prime = grad_s_cmm @ t_ft.T + trip.grad_anchors
    map_backward(mapper, tape, grad_v_prime)
    return StepStats(loss=loss, ce=ce, triplet=trip.loss)


def _batch_stream(n_rows: int, batch_size: int, total_steps: int, seed: int):
    """Epoch-wise shuffled batches without replacement; last partial kept."""
    rng = SplitMix64(seed).derive(0xBA7C)
    emitted = 0
    while emitted < total_steps:
        perm = rng.permutation(n_rows)
        for start in range(0, n_rows, batch_size):
            yield perm[start : start + batch_size]
            emitted += 1
            if emitted >= total_steps:
                return


def train(
    cache: EmbeddingCache,
    task: FewShotTask,
    config: TrainConfig,
    on_step: Callable[[int, StepStats, float], None] | None = None,
) -> Checkpoint:
    """Run exactly ``config.total_steps`` iterations and emit a checkpoint."""
    protos = build_text_prototypes(cache)
    mapper = init_mapper(cache.dim, config.depth, config.seed)
    t_ft = protos.t_ft
    grad_t_ft = protos.grad_t
    scale = config.loss_config.scale

    # Both factors are frozen, so zero-shot scores are cached once.
    s_clip_all = scale * (task.train_features @ protos.t_init)
    n_rows = task.train_features.shape[0]
    schedule = make_schedule(config, n_rows)
    state = OptimState(weight_decay=config.weight_decay)
    params = {"t_ft": t_ft}
    grads = {"t_ft": grad_t_ft}
    for j, w in enumerate(mapper.weights):
        params[f"w{j}"] = w
        grads[f"w{j}"] = mapper.grads[j]

    stats = StepStats(loss=float("nan"), ce=float("nan"), triplet=float("nan"))
    step = 0
    for batch in _batch_stream(n_rows, config.batch_size, config.total_steps, config.seed):
        step += 1
        stats = loss_and_grads(
            mapper,
            t_ft,
            grad_t_ft,
            task.train_features[batch],
            task.train_labels[batch],
            s_clip_all[batch],
            config,
        )
        if not np.isfinite(stats.loss):
            raise NonFiniteLoss(step, stats.loss)
        lr = lr_at(schedule, step)
        adamw_step(state, params, grads, lr)
        if on_step is not None:
            on_step(step, stats, lr)

    return Checkpoint(
        dim=cache.dim,
        depth=config.depth,
        weights=mapper.weights,
        t_ft=t_ft,
        t_init=np.array(protos.t_init),
        config=config,
        final_loss=stats.loss,
    )


def save_checkpoint(ckpt: Checkpoint, path: str) -> None:
    try:
        os.makedirs(path, exist_ok=True)
        blobs = {"t_ft.f64": ckpt.t_ft, "t_init.f64": ckpt.t_init}
        for j, w in enumerate(ckpt.weights):
            blobs[f"w{j}.f64"] = w
        for name, arr in blobs.items():
            np.ascontiguousarray(arr, dtype="<f8").tofile(os.path.join(path, name))
        manifest = {
            "format": CHECKPOINT_MAGIC,
            "version": ckpt.version,
            "dim": ckpt.dim,
            "depth": ckpt.depth,
            "num_layers": len(ckpt.weights),
            "num_classes": ckpt.num_classes,
            "final_loss": ckpt.final_loss,
            "config": asdict(ckpt.config),
        }
        body = json.dumps(manifest, indent=2, sort_keys=True, ensure_ascii=False)
        with open(os.path.join(path, "manifest.json"), "w", encoding="utf-8") as fh:
            fh.write(body + "\n")
    except OSError as exc:
        raise IoError(str(exc)) from exc


def load_checkpoint(path: str) -> Checkpoint:
    manifest_path = os.path.join(path, "manifest.json")
    if not os.path.isfile(manifest_path):
        raise MissingFile(manifest_path)
    with open(manifest_path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("format") != CHECKPOINT_MAGIC:
        raise BadMagic(f"format {manifest.get('format')!r}, expected {CHECKPOINT_MAGIC!r}")
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise BadVersion(f"version {manifest.get('version')!r}")
    dim = int(manifest["dim"])
    n_classes = int(manifest["num_classes"])
    n_layers = int(manifest["num_layers"])

    def read(name: str, shape: tuple[int, ...]) -> np.ndarray:
        full = os.path.join(path, name)
        if not os.path.isfile(full):
            raise MissingFile(full)
        expected = int(np.prod(shape)) * 8
        if os.path.getsize(full) != expected:
            raise DimensionMismatch(f"{name}: wrong byte count")
        return np.fromfile(full, dtype="<f8").reshape(shape)

    weights = [read(f"w{j}.f64", (dim, dim)) for j in range(n_layers)]
    t_ft = read("t_ft.f64", (dim, n_classes))
    t_init = read("t_init.f64", (dim, n_classes))
    config = TrainConfig(**manifest["config"])
    return Checkpoint(
        dim=dim,
        depth=int(manifest["depth"]),
        weights=weights,
        t_ft=t_ft,
        t_init=t_init,
        config=config,
        final_loss=float(manifest["final_loss"]),
    )
