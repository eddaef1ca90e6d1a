"""Embedding cache: on-disk format, few-shot task sampling, synthetic data.

Cache directory layout
----------------------
``manifest.json`` plus raw binary blobs, all little-endian row-major:

* ``manifest.json`` -- ``{format: "CMME", version: 1, dim, num_classes,
  num_templates, class_names, text_features: "text.f32",
  splits: {train: {count, features, labels, flip_of|null}, val: {...},
  test: {...}}}``
* ``*.f32`` -- float32 feature rows (count x dim)
* ``*.lab`` -- uint32 class indices
* ``*.flp`` -- int32 flip-source indices; -1 marks an original row

``text.f32`` holds ``num_classes * num_templates`` rows, class-major (all
templates of class 0, then class 1, ...).  Splits with count 0 need no
blobs.  Writing is byte-deterministic for identical input.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .errors import (
    BadConfig,
    BadMagic,
    BadVersion,
    DimensionMismatch,
    InsufficientSamples,
    IoError,
    LabelOutOfRange,
    MissingFile,
    NonNormalizedRow,
)
from .rng import SplitMix64

MAGIC = "CMME"
VERSION = 1
SPLIT_NAMES = ("train", "val", "test")
NORM_TOL = 1e-5


@dataclass(frozen=True)
class SplitData:
    """One split's feature rows, labels, and optional flip-source indices."""

    features: np.ndarray          # [n, d] float32, unit-norm rows
    labels: np.ndarray            # [n] uint32
    flip_of: np.ndarray | None    # [n] int32, -1 = original row

    @property
    def count(self) -> int:
        return int(self.features.shape[0])


@dataclass(frozen=True)
class EmbeddingCache:
    dim: int
    class_names: list[str]
    num_templates: int
    text_features: np.ndarray     # [N * L, d] float32, class-major
    splits: dict[str, SplitData]

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def split(self, name: str) -> SplitData:
        return self.splits[name]


@dataclass(frozen=True)
class FewShotTask:
    """A k-shot training subset plus read-only val/test views of the cache."""

    shots: int
    seed: int
    train_features: np.ndarray    # [kN or 2kN, d] float64
    train_labels: np.ndarray      # [kN or 2kN] int64
    base_rows: np.ndarray         # cache train-split indices of the base samples
    flip_rows: np.ndarray         # indices of the appended flipped rows
    val: SplitData
    test: SplitData


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


def _check_norms(features: np.ndarray, where: str) -> None:
    if features.shape[0] == 0:
        return
    feats = features.astype(np.float64)
    norms = np.sqrt(np.einsum("ij,ij->i", feats, feats))
    bad = np.flatnonzero(np.abs(norms - 1.0) > NORM_TOL)
    if bad.size:
        i = int(bad[0])
        raise NonNormalizedRow(f"{where} row {i} has norm {norms[i]:.8f}")


def validate_cache(cache: EmbeddingCache) -> None:
    """Enforce every cache invariant; raises on the first violation."""
    n_classes, n_templates, d = cache.num_classes, cache.num_templates, cache.dim
    if n_classes < 2:
        raise BadConfig(f"need at least 2 classes, got {n_classes}")
    if n_templates < 1:
        raise BadConfig("need at least 1 template")
    if d < 1:
        raise BadConfig("dim must be positive")
    if cache.text_features.shape != (n_classes * n_templates, d):
        raise DimensionMismatch(
            f"text features shape {cache.text_features.shape} != "
            f"({n_classes * n_templates}, {d})"
        )
    _check_norms(cache.text_features, "text")
    for name in SPLIT_NAMES:
        if name not in cache.splits:
            raise BadConfig(f"missing split {name!r}")
        split = cache.splits[name]
        n = split.count
        if split.features.shape != (n, d):
            raise DimensionMismatch(f"{name} features shape {split.features.shape}")
        if split.labels.shape != (n,):
            raise DimensionMismatch(f"{name} labels shape {split.labels.shape}")
        if n and int(split.labels.max(initial=0)) >= n_classes:
            raise LabelOutOfRange(
                f"{name} label {int(split.labels.max())} >= {n_classes}"
            )
        _check_norms(split.features, name)
        if split.flip_of is not None:
            if split.flip_of.shape != (n,):
                raise DimensionMismatch(f"{name} flip_of shape {split.flip_of.shape}")
            flips = split.flip_of
            out = np.flatnonzero((flips < -1) | (flips >= n))
            if out.size:
                raise DimensionMismatch(
                    f"{name} flip_of[{int(out[0])}] = {int(flips[out[0]])} out of range"
                )
            self_ref = np.flatnonzero(flips == np.arange(n))
            if self_ref.size:
                raise DimensionMismatch(f"{name} flip_of row {int(self_ref[0])} points at itself")


def _read_blob(path: str, dtype: str, shape: tuple[int, ...], what: str) -> np.ndarray:
    if not os.path.isfile(path):
        raise MissingFile(path)
    expected = int(np.prod(shape)) * np.dtype(dtype).itemsize
    size = os.path.getsize(path)
    if size != expected:
        raise DimensionMismatch(f"{what}: {path} holds {size} bytes, expected {expected}")
    data = np.fromfile(path, dtype=dtype)
    return data.reshape(shape)


def load_cache(path: str) -> EmbeddingCache:
    """Load and fully validate a cache directory.

    Rows that are not unit-norm are an error, never silently re-normalized.
    """
    manifest_path = os.path.join(path, "manifest.json")
    if not os.path.isfile(manifest_path):
        raise MissingFile(manifest_path)
    try:
        with open(manifest_path, "r", encoding="utf-8") as fh:
            manifest = json.load(fh)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise BadMagic(f"manifest is not valid JSON: {exc}") from exc
    if not isinstance(manifest, dict):
        raise BadMagic("manifest is not a JSON object")
    if manifest.get("format") != MAGIC:
        raise BadMagic(f"format {manifest.get('format')!r}, expected {MAGIC!r}")
    if manifest.get("version") != VERSION:
        raise BadVersion(f"version {manifest.get('version')!r}, expected {VERSION}")
    try:
        dim = int(manifest["dim"])
        num_classes = int(manifest["num_classes"])
        num_templates = int(manifest["num_templates"])
        class_names = [str(name) for name in manifest["class_names"]]
        text_file = str(manifest["text_features"])
        split_entries = {name: manifest["splits"][name] for name in SPLIT_NAMES}
    except (KeyError, TypeError, ValueError) as exc:
        raise DimensionMismatch(f"manifest structure: {exc!r}") from exc
    if len(class_names) != num_classes:
        raise DimensionMismatch(
            f"{len(class_names)} class names for num_classes={num_classes}"
        )
    text = _read_blob(
        os.path.join(path, text_file),
        "<f4",
        (num_classes * num_templates, dim),
        "text features",
    )
    splits: dict[str, SplitData] = {}
    for name in SPLIT_NAMES:
        entry = split_entries[name]
        count = int(entry["count"])
        if count == 0:
            feats = np.zeros((0, dim), dtype=np.float32)
            labels = np.zeros((0,), dtype=np.uint32)
            flips = None
        else:
            feats = _read_blob(
                os.path.join(path, entry["features"]), "<f4", (count, dim),
                f"{name} features",
            )
            labels = _read_blob(
                os.path.join(path, entry["labels"]), "<u4", (count,),
                f"{name} labels",
            )
            flips = None
            if entry.get("flip_of"):
                flips = _read_blob(
                    os.path.join(path, entry["flip_of"]), "<i4", (count,),
                    f"{name} flip_of",
                )
        splits[name] = SplitData(
            _freeze(feats), _freeze(labels), _freeze(flips) if flips is not None else None
        )
    cache = EmbeddingCache(dim, class_names, num_templates, _freeze(text), splits)
    validate_cache(cache)
    return cache


def write_cache(cache: EmbeddingCache, path: str) -> None:
    """Write a validated cache; identical caches produce identical bytes."""
    validate_cache(cache)
    try:
        os.makedirs(path, exist_ok=True)
        split_entries = {}
        for name in SPLIT_NAMES:
            split = cache.splits[name]
            entry = {
                "count": split.count,
                "features": f"{name}.f32",
                "labels": f"{name}.lab",
                "flip_of": f"{name}.flp" if split.flip_of is not None else None,
            }
            split_entries[name] = entry
            if split.count == 0:
                continue
            split.features.astype("<f4").tofile(os.path.join(path, entry["features"]))
            split.labels.astype("<u4").tofile(os.path.join(path, entry["labels"]))
            if split.flip_of is not None:
                split.flip_of.astype("<i4").tofile(os.path.join(path, entry["flip_of"]))
        cache.text_features.astype("<f4").tofile(os.path.join(path, "text.f32"))
        manifest = {
            "format": MAGIC,
            "version": VERSION,
            "dim": cache.dim,
            "num_classes": cache.num_classes,
            "num_templates": cache.num_templates,
            "class_names": cache.class_names,
            "text_features": "text.f32",
            "splits": split_entries,
        }
        body = json.dumps(manifest, indent=2, sort_keys=True, ensure_ascii=False)
        with open(os.path.join(path, "manifest.json"), "w", encoding="utf-8") as fh:
            fh.write(body + "\n")
    except OSError as exc:
        raise IoError(str(exc)) from exc


def sample_fewshot(
    cache: EmbeddingCache, shots: int, seed: int, use_flip_rows: bool = True
) -> FewShotTask:
    """Draw exactly ``shots`` base samples per class from the train split.

    Base samples are drawn without replacement among original rows
    (``flip_of == -1``) with the seeded stream, class by class in label
    order.  When ``use_flip_rows`` and the cache stores flip pairs, each
    base row's flipped counterpart is appended after the base block, in the
    same order, so row ``i + kN`` augments row ``i``.
    """
    if shots < 1:
        raise BadConfig("shots must be >= 1")
    train = cache.split("train")
    flips = train.flip_of
    originals_mask = np.ones(train.count, dtype=bool) if flips is None else flips == -1
    flipped_by: dict[int, list[int]] = {}
    if flips is not None:
        for row, src in enumerate(flips):
            if src >= 0:
                flipped_by.setdefault(int(src), []).append(row)

    rng = SplitMix64(seed).derive(0x5A3)
    base_rows: list[int] = []
    for k in range(cache.num_classes):
        candidates = np.flatnonzero(originals_mask & (train.labels == k))
        if candidates.size < shots:
            raise InsufficientSamples(k, int(candidates.size), shots)
        picked = rng.sample_without_replacement(int(candidates.size), shots)
        base_rows.extend(int(candidates[i]) for i in picked)

    flip_rows: list[int] = []
    if use_flip_rows and flips is not None:
        for row in base_rows:
            flip_rows.extend(flipped_by.get(row, ()))

    rows = np.asarray(base_rows + flip_rows, dtype=np.int64)
    feats = train.features[rows].astype(np.float64)
    labels = train.labels[rows].astype(np.int64)
    return FewShotTask(
        shots=shots,
        seed=seed,
        train_features=_freeze(feats),
        train_labels=_freeze(labels),
        base_rows=_freeze(np.asarray(base_rows, dtype=np.int64)),
        flip_rows=_freeze(np.asarray(flip_rows, dtype=np.int64)),
        val=cache.split("val"),
        test=cache.split("test"),
    )


@dataclass(frozen=True)
class SynthConfig:
    """Configuration for the synthetic cache generator.

    Image rows are per-class Gaussian bumps on the unit sphere; text rows
    are the class means pushed through a fixed rotation plus a global shift
    of magnitude ``gap_shift``, deliberately reproducing a distribution
    mismatch between the two populations.  ``class_spread = 0`` collapses
    all class means onto one point.
    """

    num_classes: int
    dim: int
    num_templates: int = 4
    train_per_class: int = 32
    val_per_class: int = 50
    test_per_class: int = 50
    gap_shift: float = 0.0
    rotation_seed: int | None = None   # None = identity rotation
    noise_sigma: float = 0.05
    class_spread: float = 1.0
    seed: int = 0
    with_flips: bool = True


def _random_rotation(dim: int, seed: int) -> np.ndarray:
    """Orthogonal matrix from a seeded composition of Givens rotations.

    Pure elementwise updates keep the construction portable (no BLAS/LAPACK
    in the loop), so caches are bit-identical across platforms.
    """
    rng = SplitMix64(seed).derive(0x407)
    rot = np.eye(dim)
    for _ in range(3 * dim):
        p = rng.randbelow(dim)
        q = rng.randbelow(dim - 1)
        if q >= p:
            q += 1
        angle = rng.uniform(1)[0] * 2.0 * np.pi
        c, s = np.cos(angle), np.sin(angle)
        row_p = rot[p].copy()
        row_q = rot[q].copy()
        rot[p] = c * row_p - s * row_q
        rot[q] = s * row_p + c * row_q
    return rot


def _unit_rows(raw: np.ndarray) -> np.ndarray:
    norms = np.sqrt(np.einsum("ij,ij->i", raw, raw))
    if np.any(norms < 1e-12):
        raise BadConfig("degenerate synthetic sample with zero norm")
    return raw / norms[:, None]


def synth_generate(config: SynthConfig) -> EmbeddingCache:
    """Generate a validated synthetic cache, bit-deterministic per seed."""
    n, d, l = config.num_classes, config.dim, config.num_templates
    if n < 2 or d < 2:
        raise BadConfig("need num_classes >= 2 and dim >= 2")
    if l < 1:
        raise BadConfig("need num_templates >= 1")
    if min(config.train_per_class, config.val_per_class, config.test_per_class) < 1:
        raise BadConfig("per-class counts must be >= 1")
    if config.noise_sigma < 0 or config.gap_shift < 0 or config.class_spread < 0:
        raise BadConfig("noise_sigma, gap_shift and class_spread must be >= 0")

    root = SplitMix64(config.seed)
    mean_rng = root.derive(1)
    image_rng = root.derive(2)
    template_rng = root.derive(3)
    shift_rng = root.derive(4)

    base = mean_rng.normal(d)
    base /= np.sqrt(base @ base)
    means = _unit_rows(base[None, :] + config.class_spread * mean_rng.normal(n * d).reshape(n, d))

    rotation = (
        np.eye(d) if config.rotation_seed is None else _random_rotation(d, config.rotation_seed)
    )
    shift_dir = shift_rng.normal(d)
    shift_dir /= np.sqrt(shift_dir @ shift_dir)
    shift = config.gap_shift * shift_dir

    text_raw = (
        means[:, None, :] + config.noise_sigma * template_rng.normal(n * l * d).reshape(n, l, d)
    )
    text = _unit_rows((text_raw.reshape(n * l, d) @ rotation.T) + shift[None, :])

    def image_block(per_class: int) -> tuple[np.ndarray, np.ndarray]:
        noise = image_rng.normal(n * per_class * d).reshape(n, per_class, d)
        feats = _unit_rows((means[:, None, :] + config.noise_sigma * noise).reshape(-1, d))
        labels = np.repeat(np.arange(n, dtype=np.uint32), per_class)
        return feats, labels

    train_feats, train_labels = image_block(config.train_per_class)
    if config.with_flips:
        flip_feats, _ = image_block(config.train_per_class)
        nb = train_feats.shape[0]
        train_feats = np.concatenate([train_feats, flip_feats], axis=0)
        train_labels = np.concatenate([train_labels, train_labels])
        flip_of = np.concatenate(
            [np.full(nb, -1, dtype=np.int32), np.arange(nb, dtype=np.int32)]
        )
    else:
        flip_of = None
    val_feats, val_labels = image_block(config.val_per_class)
    test_feats, test_labels = image_block(config.test_per_class)

    def split(feats: np.ndarray, labels: np.ndarray, flips: np.ndarray | None) -> SplitData:
        return SplitData(
            _freeze(feats.astype(np.float32)),
            _freeze(labels),
            _freeze(flips) if flips is not None else None,
        )

    cache = EmbeddingCache(
        dim=d,
        class_names=[f"class_{k:03d}" for k in range(n)],
        num_templates=l,
        text_features=_freeze(text.astype(np.float32)),
        splits={
            "train": split(train_feats, train_labels, flip_of),
            "val": split(val_feats, val_labels, None),
            "test": split(test_feats, test_labels, None),
        },
    )
    validate_cache(cache)
    return cache


def caches_equal(a: EmbeddingCache, b: EmbeddingCache) -> bool:
    """Exact equality, used by roundtrip tests."""
    if (a.dim, a.class_names, a.num_templates) != (b.dim, b.class_names, b.num_templates):
        return False
    if not np.array_equal(a.text_features, b.text_features):
        return False
    for name in SPLIT_NAMES:
        sa, sb = a.splits[name], b.splits[name]
        if not np.array_equal(sa.features, sb.features):
            return False
        if not np.array_equal(sa.labels, sb.labels):
            return False
        if (sa.flip_of is None) != (sb.flip_of is None):
            return False
        if sa.flip_of is not None and not np.array_equal(sa.flip_of, sb.flip_of):
            return False
    return True
